#ifndef QKIN_TOOLS_CLI_HPP
#define QKIN_TOOLS_CLI_HPP

#include <filesystem>
#include <functional>
#include <iomanip>
#include <iostream>
#include <set>

#include <CLI11.hpp>
#include <openssl/evp.h>

#include "qkin/qkin.hpp"

namespace qkin::cli {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Configuration: defaults, file merge with schema checks, flag overrides.

/// Keys whose default is a string but which also accept a number.
inline const std::set<std::string>& string_or_number_keys()
{
    static const std::set<std::string> keys{"eta"};
    return keys;
}

/// Keys holding file paths; relative paths from a config file resolve
/// against the file's directory.
inline const std::set<std::string>& path_keys()
{
    static const std::set<std::string> keys{"input"};
    return keys;
}

inline std::size_t line_of(const std::string& text, std::size_t byte)
{
    byte = std::min(byte, text.size());
    return 1 + static_cast<std::size_t>(std::count(text.begin(), text.begin() + static_cast<long>(byte), '\n'));
}

inline std::string locate(const std::string& file, const std::string& text, const std::string& key)
{
    const auto pos = text.find("\"" + key + "\"");
    if (file.empty()) return "";
    if (pos == std::string::npos) return file + ": ";
    return file + ":" + std::to_string(line_of(text, pos)) + ": ";
}

inline bool compatible(const json& def, const json& val, const std::string& key)
{
    if (def.is_null()) return true;
    if (def.is_number_float()) return val.is_number();
    if (def.is_number_integer() || def.is_number_unsigned()) return val.is_number_integer() || val.is_number_unsigned();
    if (def.is_boolean()) return val.is_boolean();
    if (def.is_string()) return val.is_string() || (string_or_number_keys().count(key) && val.is_number());
    if (def.is_array()) return val.is_array();
    if (def.is_object()) return val.is_object();
    return false;
}

inline std::string type_name(const json& def)
{
    if (def.is_number_float()) return "number";
    if (def.is_number()) return "integer";
    if (def.is_boolean()) return "boolean";
    if (def.is_string()) return "string";
    if (def.is_array()) return "array";
    if (def.is_object()) return "object";
    return "value";
}

/// Copies `user` into `cfg`, rejecting keys absent from `cfg` and values
/// whose JSON type differs from the default.
inline void merge(json& cfg, const json& user, const std::string& prefix, const std::string& file, const std::string& text)
{
    if (!user.is_object()) throw ConfigError(file + ": " + (prefix.empty() ? "top level" : prefix) + " must be an object");
    for (auto it = user.begin(); it != user.end(); ++it) {
        const std::string path = prefix.empty() ? it.key() : prefix + "." + it.key();
        if (!cfg.contains(it.key())) throw ConfigError(locate(file, text, it.key()) + "unknown key '" + path + "'");
        json& slot = cfg[it.key()];
        if (!compatible(slot, it.value(), it.key()))
            throw ConfigError(locate(file, text, it.key()) + "field '" + path + "' must be " + type_name(slot) + ", got "
                              + it.value().dump());
        if (slot.is_object()) merge(slot, it.value(), path, file, text);
        else slot = it.value();
    }
}

inline json load_config_file(const std::string& path, std::string& text)
{
    std::ifstream in(path);
    if (!in) throw ConfigError("config file '" + path + "' not found or unreadable");
    std::stringstream ss;
    ss << in.rdbuf();
    text = ss.str();
    try {
        return json::parse(text);
    } catch (const json::parse_error& e) {
        throw ConfigError(path + ":" + std::to_string(line_of(text, e.byte)) + ": invalid JSON: " + e.what());
    }
}

/// Parses a command-line value as JSON when possible, else as a string.
/// String-valued keys take the raw text unless it is a number for a key
/// that also accepts numbers.
inline json flag_value(const std::string& raw, const json& def, const std::string& key)
{
    json v;
    try {
        v = json::parse(raw);
    } catch (const json::parse_error&) {
        return json(raw);
    }
    if (def.is_string() && !(v.is_number() && string_or_number_keys().count(key))) return json(raw);
    return v;
}

inline json* find_path(json& cfg, const std::string& path)
{
    json* node = &cfg;
    std::stringstream ss(path);
    std::string part;
    while (std::getline(ss, part, '.')) {
        if (!node->is_object() || !node->contains(part)) return nullptr;
        node = &(*node)[part];
    }
    return node;
}

inline void apply_override(json& cfg, const std::string& path, const std::string& raw, const std::string& origin)
{
    json* slot = find_path(cfg, path);
    if (!slot) throw ConfigError(origin + ": unknown key '" + path + "'");
    const std::string leaf = path.substr(path.rfind('.') == std::string::npos ? 0 : path.rfind('.') + 1);
    const json v = flag_value(raw, *slot, leaf);
    if (!compatible(*slot, v, leaf))
        throw ConfigError(origin + ": field '" + path + "' must be " + type_name(*slot) + ", got '" + raw + "'");
    *slot = v;
}

// ---------------------------------------------------------------------------
// Output directory bookkeeping.

inline std::string sha256_hex(const std::string& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot read " + path + " for hashing");
    EVP_MD_CTX* ctx = EVP_MD_CTX_new();
    EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr);
    std::vector<char> buf(1 << 16);
    while (in) {
        in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
        if (in.gcount() > 0) EVP_DigestUpdate(ctx, buf.data(), static_cast<std::size_t>(in.gcount()));
    }
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_DigestFinal_ex(ctx, md, &len);
    EVP_MD_CTX_free(ctx);
    std::ostringstream hex;
    for (unsigned i = 0; i < len; ++i) hex << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(md[i]);
    return hex.str();
}

class Output {
public:
    explicit Output(fs::path dir) : dir_(std::move(dir)) { fs::create_directories(dir_); }

    const fs::path& dir() const { return dir_; }

    /// Absolute path for a new artifact; the artifact is listed in the manifest.
    std::string file(const std::string& rel)
    {
        const fs::path p = dir_ / rel;
        if (p.has_parent_path()) fs::create_directories(p.parent_path());
        files_.insert(rel);
        return p.string();
    }

    void write_json(const std::string& rel, const json& j)
    {
        std::ofstream out(file(rel));
        out << j.dump(2) << '\n';
    }

    void write_text(const std::string& rel, const std::string& text)
    {
        std::ofstream out(file(rel));
        out << text;
    }

    void write_manifest()
    {
        json m;
        m["files"] = json::array();
        for (const auto& rel : files_) {
            const auto p = (dir_ / rel).string();
            m["files"].push_back({{"path", rel}, {"sha256", sha256_hex(p)}, {"bytes", fs::file_size(p)}});
        }
        std::ofstream out((dir_ / "manifest.json").string());
        out << m.dump(2) << '\n';
    }

private:
    fs::path dir_;
    std::set<std::string> files_;
};

/// gnuplot script plotting columns of a CSV written next to it.
inline std::string gnuplot_script(const std::string& csv, const std::string& title, const std::string& xlabel,
                                  const std::string& ylabel, const std::vector<std::pair<int, std::string>>& columns,
                                  bool logx = false, bool logy = false)
{
    std::ostringstream s;
    s << "set datafile separator ','\n";
    s << "set key autotitle columnhead\n";
    s << "set title '" << title << "'\n";
    s << "set xlabel '" << xlabel << "'\n";
    s << "set ylabel '" << ylabel << "'\n";
    if (logx) s << "set logscale x\n";
    if (logy) s << "set logscale y\n";
    s << "plot ";
    for (std::size_t i = 0; i < columns.size(); ++i)
        s << (i ? ", \\\n     " : "") << "'" << csv << "' using 1:" << columns[i].first << " with linespoints title '"
          << columns[i].second << "'";
    s << "\npause -1\n";
    return s.str();
}

// ---------------------------------------------------------------------------
// Shared builders.

/// Wraps setup code: any library error raised while turning the config into
/// objects is a configuration error.
template <class F>
auto configured(const std::string& what, F&& f) -> decltype(f())
{
    try {
        return f();
    } catch (const ConfigError&) {
        throw;
    } catch (const NumericalFault&) {
        throw;
    } catch (const Error& e) {
        throw ConfigError(what + ": " + e.what());
    } catch (const std::invalid_argument& e) {
        throw ConfigError(what + ": " + e.what());
    }
}

inline DispersionModel make_model(const json& cfg)
{
    const auto kind = dispersion_kind_from_string(cfg.at("model").get<std::string>());
    const int d = cfg.at("dim").get<int>();
    if (d < 1 || d > 3) throw ConfigError("dim must be 1, 2 or 3");
    switch (kind) {
    case DispersionKind::LatticeNN: return DispersionModel::lattice(d);
    case DispersionKind::ContinuumQuadratic:
        return DispersionModel::continuum(d, cfg.contains("box") ? std::optional<double>(cfg.at("box").get<double>())
                                                                 : std::nullopt);
    case DispersionKind::PhononAcoustic: return DispersionModel::acoustic(d);
    case DispersionKind::PhononOptical: return DispersionModel::optical(cfg.value("gap", 1.0), d);
    }
    throw ConfigError("unsupported model");
}

inline Statistics stats_of(const json& cfg)
{
    const int th = cfg.at("theta").get<int>();
    if (th < -1 || th > 1) throw ConfigError("theta must be -1, 0 or 1");
    return statistics_from_theta(th);
}

inline Vec vec_of(const json& a, const std::string& key)
{
    if (!a.is_array() || a.size() > 3) throw ConfigError("'" + key + "' must be an array of at most 3 numbers");
    Vec v{0.0, 0.0, 0.0};
    for (std::size_t j = 0; j < a.size(); ++j) {
        if (!a[j].is_number()) throw ConfigError("'" + key + "' must contain numbers");
        v[j] = a[j].get<double>();
    }
    return v;
}

inline json vec_json(const Vec& v, int d)
{
    json a = json::array();
    for (int j = 0; j < d; ++j) a.push_back(v[j]);
    return a;
}

/// eta: "auto" picks auto_eta at energy E, a number is used as is.
inline double eta_of(const json& cfg, const MomentumGrid& grid, const DispersionModel& model, double E)
{
    const auto& e = cfg.at("eta");
    if (e.is_string()) {
        if (e.get<std::string>() != "auto") throw ConfigError("eta must be a positive number or \"auto\"");
        return auto_eta(grid, model, E);
    }
    const double v = e.get<double>();
    if (!(v > 0.0)) throw ConfigError("eta must be positive");
    return v;
}

inline double mean_energy(const MomentumGrid& grid, const DispersionModel& model, std::span<const double> W)
{
    const auto m = moments(grid, model, W);
    return m.energy / m.mass;
}

inline Distribution momentum_bump(GridPtr grid, const DispersionModel& model, const Vec& k0, double sigma, double amp,
                                  Statistics stats)
{
    if (!(sigma > 0.0)) throw ConfigError("sigma_k must be positive");
    std::vector<double> w(grid->size());
    for (std::size_t i = 0; i < w.size(); ++i) {
        const Vec& k = grid->node(i);
        double r2 = 0.0;
        for (int j = 0; j < grid->dim(); ++j) {
            const double dk = model.on_torus() ? std::remainder(k[j] - k0[j], two_pi) : k[j] - k0[j];
            r2 += dk * dk;
        }
        w[i] = amp * std::exp(-0.5 * r2 / (sigma * sigma));
    }
    Distribution W(std::move(grid), std::move(w), stats);
    check_admissible(W);
    return W;
}

inline SolverConfig solver_of(const json& s)
{
    SolverConfig c;
    c.dt = s.at("dt").get<double>();
    c.dt_min = s.at("dt_min").get<double>();
    const double dmax = s.at("dt_max").get<double>();
    c.dt_max = dmax > 0.0 ? dmax : std::numeric_limits<double>::infinity();
    c.tolerance = s.at("tolerance").get<double>();
    c.t_max = s.at("t_max").get<double>();
    c.snapshot_every = s.at("snapshot_every").get<double>();
    const auto split = s.at("splitting").get<std::string>();
    if (split == "strang") c.splitting = SplittingOrder::Strang;
    else if (split == "lie") c.splitting = SplittingOrder::Lie;
    else throw ConfigError("splitting must be \"strang\" or \"lie\"");
    c.validate();
    return c;
}

inline json solver_defaults(double t_max, double snapshot_every, double tolerance)
{
    return {{"dt", 0.05},       {"dt_min", 1e-9},
            {"dt_max", 0.0},    {"tolerance", tolerance},
            {"t_max", t_max},   {"snapshot_every", snapshot_every},
            {"splitting", "strang"}};
}

inline json common_defaults(json j)
{
    j["seed"] = 1;
    j["threads"] = 0;
    j["output_dir"] = "qkin-out";
    return j;
}

inline json ode_json(const OdeStats& s)
{
    return {{"accepted", s.accepted}, {"rejected", s.rejected}, {"rejected_inadmissible", s.rejected_inadmissible}};
}

inline json moments_json(const Moments& m, int d)
{
    return {{"mass", m.mass}, {"momentum", vec_json(m.momentum, d)}, {"energy", m.energy}};
}

inline std::string indexed(const std::string& stem, std::size_t i, const std::string& ext)
{
    std::ostringstream s;
    s << stem << std::setw(4) << std::setfill('0') << i << ext;
    return s.str();
}

// ---------------------------------------------------------------------------
// Subcommands.

struct Subcommand {
    std::string name;
    std::string help;
    json defaults;
    /// flag (without dashes) -> config key path
    std::vector<std::pair<std::string, std::string>> flags;
    std::function<json(const json& cfg, Output& out)> run;
};

inline Subcommand dispersion_decay_command()
{
    Subcommand c;
    c.name = "dispersion-decay";
    c.help = "decay of the free propagator amplitude |int dk exp(-i omega t)|";
    c.defaults = common_defaults({{"model", "lattice"},
                                  {"dim", 3},
                                  {"tmax", 200.0},
                                  {"samples", 400},
                                  {"nodes_per_axis", 0},
                                  {"gap", 1.0},
                                  {"box", 6.0}});
    c.flags = {{"model", "model"}, {"dim", "dim"}, {"tmax", "tmax"}, {"samples", "samples"}, {"nodes", "nodes_per_axis"}};
    c.run = [](const json& cfg, Output& out) {
        const auto model = configured("model", [&] { return make_model(cfg); });
        const double tmax = cfg.at("tmax").get<double>();
        const int samples = cfg.at("samples").get<int>();
        const int nodes = cfg.at("nodes_per_axis").get<int>();
        if (!(tmax > 0.0)) throw ConfigError("tmax must be positive");
        if (samples < 3) throw ConfigError("samples must be at least 3");
        if (nodes < 0) throw ConfigError("nodes_per_axis must be nonnegative");
        const auto pd = propagator_decay(model, tmax, static_cast<std::size_t>(samples), static_cast<std::size_t>(nodes));
        {
            io::CsvWriter w(out.file("decay.csv"), {"t", "amplitude", "running_integral"});
            for (std::size_t i = 0; i < pd.t.size(); ++i) w.row({pd.t[i], pd.amplitude[i], pd.running_integral[i]});
        }
        out.write_text("decay.gp", gnuplot_script("decay.csv", "free propagator decay", "t", "amplitude",
                                                  {{2, "amplitude"}}, true, true));
        return json{{"model", to_string(model.kind())},
                    {"dim", model.dim()},
                    {"exponent", pd.exponent},
                    {"exponent_stderr", pd.exponent_stderr},
                    {"expected_exponent", 0.5 * model.dim()},
                    {"fit_t_min", pd.fit_t_min},
                    {"fit_t_max", pd.fit_t_max},
                    {"fit_on_peaks", pd.fit_on_peaks},
                    {"fit_unreliable", pd.fit_unreliable},
                    {"nodes_per_axis", pd.nodes_per_axis}};
    };
    return c;
}

inline Subcommand linear_relax_command()
{
    Subcommand c;
    c.name = "linear-relax";
    c.help = "relaxation of a momentum bump to the energy shell under the linear collision operator";
    c.defaults = common_defaults({{"model", "lattice"},
                                  {"dim", 3},
                                  {"grid", 16},
                                  {"box", 6.0},
                                  {"eta", "auto"},
                                  {"spectrum", "constant:v=1"},
                                  {"storage", "auto"},
                                  {"tmax", 50.0},
                                  {"snapshot_every", 5.0},
                                  {"tolerance", 1e-8},
                                  {"initial", {{"k0", {1.0, 0.5, 0.0}}, {"sigma_k", 0.5}, {"amplitude", 1.0}}}});
    c.flags = {{"model", "model"}, {"dim", "dim"},   {"grid", "grid"},         {"eta", "eta"},
               {"tmax", "tmax"},   {"spectrum", "spectrum"}, {"snapshot-every", "snapshot_every"}};
    c.run = [](const json& cfg, Output& out) {
        auto [M, W0] = configured("linear-relax setup", [&] {
            const auto model = make_model(cfg);
            const int n = cfg.at("grid").get<int>();
            if (n < 2) throw ConfigError("grid must be at least 2");
            auto grid = make_grid(grid_for(model, static_cast<std::size_t>(n), cfg.at("box").get<double>()));
            const auto& ini = cfg.at("initial");
            auto W = momentum_bump(grid, model, vec_of(ini.at("k0"), "initial.k0"), ini.at("sigma_k").get<double>(),
                                   ini.at("amplitude").get<double>(), Statistics::Boltzmann);
            const double eta = eta_of(cfg, *grid, model, mean_energy(*grid, model, W.values));
            const auto st = cfg.at("storage").get<std::string>();
            MatrixStorage storage = MatrixStorage::Auto;
            if (st == "dense") storage = MatrixStorage::Dense;
            else if (st == "levels") storage = MatrixStorage::LevelAggregated;
            else if (st == "sparse") storage = MatrixStorage::Sparse;
            else if (st != "auto") throw ConfigError("storage must be auto|dense|levels|sparse");
            auto m = std::make_shared<const CollisionMatrix>(grid, model, Spectrum::parse(cfg.at("spectrum").get<std::string>()),
                                                              eta, storage);
            return std::pair{m, W};
        });
        SolverConfig sc;
        sc.tolerance = cfg.at("tolerance").get<double>();
        sc.snapshot_every = cfg.at("snapshot_every").get<double>();
        const double tmax = cfg.at("tmax").get<double>();
        if (!(tmax > 0.0)) throw ConfigError("tmax must be positive");
        configured("solver", [&] { sc.validate(); return 0; });
        const auto r = relax_to_shell(*M, W0, tmax, sc);
        const auto& grid = *M->grid();
        json curve = json::array();
        {
            io::CsvWriter w(out.file("relax.csv"), {"t", "mass", "energy", "shell_deviation"});
            for (std::size_t i = 0; i < r.times.size(); ++i) {
                w.row({r.times[i], r.mass[i], r.energy[i], r.shell_deviation[i]});
                curve.push_back({r.times[i], r.shell_deviation[i]});
            }
        }
        for (std::size_t i = 0; i < r.snapshots.size(); ++i)
            io::write_csv(out.file(indexed("snapshots/snapshot_", i, ".csv")), grid, r.snapshots[i]);
        out.write_text("relax.gp", gnuplot_script("relax.csv", "shell deviation", "t", "deviation", {{4, "shell_deviation"}},
                                                  false, true));
        return json{{"mass_drift", r.mass_drift},
                    {"energy_drift", r.energy_drift},
                    {"shell_variance_curve", curve},
                    {"spectral_gap_estimate", r.spectral_gap_estimate},
                    {"eta", M->eta()},
                    {"storage", to_string(M->storage())},
                    {"nodes", grid.size()},
                    {"ode", ode_json(r.stats)}};
    };
    return c;
}

inline Subcommand uu_apply_command()
{
    Subcommand c;
    c.name = "uu-apply";
    c.help = "evaluate the Uehling-Uhlenbeck collision operator on a distribution read from CSV";
    c.defaults = common_defaults({{"input", ""},
                                  {"model", "continuum"},
                                  {"dim", 3},
                                  {"potential", "gaussian:a=1,w=1"},
                                  {"theta", -1},
                                  {"out", "C.csv"},
                                  {"validate_mc", 0},
                                  {"mc_points", 4},
                                  {"n_s", 128},
                                  {"eta", "auto"},
                                  {"project", true}});
    c.flags = {{"input", "input"},       {"model", "model"}, {"potential", "potential"}, {"theta", "theta"},
               {"out", "out"},           {"validate-mc", "validate_mc"}, {"n-s", "n_s"}, {"mc-points", "mc_points"}};
    c.run = [](const json& cfg, Output& out) {
        const auto input = cfg.at("input").get<std::string>();
        if (input.empty()) throw ConfigError("uu-apply needs an input distribution (--input)");
        if (cfg.at("validate_mc").get<long long>() < 0) throw ConfigError("validate_mc must be nonnegative");
        auto [op, W] = configured("uu-apply setup", [&] {
            auto model = make_model(cfg);
            const auto stats = stats_of(cfg);
            auto Wd = io::read_distribution_csv(input, model, stats);
            if (!model.on_torus()) model = DispersionModel::continuum(model.dim(), Wd.grid->half_width());
            const auto V = PairPotential::parse(cfg.at("potential").get<std::string>());
            UuQuadrature q;
            if (model.on_torus()) {
                q = UuQuadrature::smeared(eta_of(cfg, *Wd.grid, model, mean_energy(*Wd.grid, model, Wd.values)),
                                          cfg.at("project").get<bool>());
            } else {
                const int ns = cfg.at("n_s").get<int>();
                if (ns < 1) throw ConfigError("n_s must be positive");
                q = UuQuadrature::sphere(static_cast<std::size_t>(ns), cfg.at("project").get<bool>());
            }
            return std::pair{std::make_shared<const UuOperator>(Wd.grid, model, V, stats, q), Wd};
        });
        const auto res = op->evaluate(W);
        const auto& grid = *W.grid;
        const auto& model = op->model();
        const fs::path outp(cfg.at("out").get<std::string>());
        io::write_csv(out.file(outp.is_absolute() ? outp.filename().string() : outp.string()), grid, res.C);
        const int d = grid.dim();
        const auto omega = node_energies(grid, model);
        std::vector<double> absC(res.C.size()), g(res.C.size()), l(res.C.size()), e(res.C.size());
        for (std::size_t i = 0; i < res.C.size(); ++i) {
            absC[i] = std::abs(res.C[i]);
            g[i] = std::abs(res.gain[i]);
            l[i] = std::abs(res.loss[i]);
            e[i] = omega[i] * res.C[i];
        }
        json mom = json::array();
        for (int a = 0; a < d; ++a) {
            std::vector<double> p(res.C.size());
            for (std::size_t i = 0; i < p.size(); ++i) p[i] = grid.node(i)[a] * res.C[i];
            mom.push_back(integrate(grid, p));
        }
        json rep{{"nodes", grid.size()},
                 {"theta", static_cast<int>(theta_of(W.stats))},
                 {"potential", op->potential().describe()},
                 {"C_l1", integrate(grid, absC)},
                 {"gain_l1", integrate(grid, g)},
                 {"loss_l1", integrate(grid, l)},
                 {"mass_residual", integrate(grid, res.C)},
                 {"momentum_residual", mom},
                 {"energy_residual", integrate(grid, e)},
                 {"entropy_production", entropy_production(W, res.C)}};
        const auto n_mc = cfg.at("validate_mc").get<std::size_t>();
        if (n_mc > 0) {
            if (model.on_torus()) throw ConfigError("validate_mc needs the continuum model");
            std::vector<std::size_t> order(grid.size());
            std::iota(order.begin(), order.end(), std::size_t{0});
            std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return absC[a] > absC[b]; });
            const auto points = std::min<std::size_t>(cfg.at("mc_points").get<std::size_t>(), order.size());
            json mc = json::array();
            std::size_t within = 0;
            for (std::size_t p = 0; p < points; ++p) {
                const std::size_t i = order[p];
                // the deterministic value without projection is what the oracle estimates
                const double det = res.gain[i] - res.loss[i];
                const auto est = mc_oracle(W, op->potential(), grid.node(i), n_mc,
                                           cfg.at("seed").get<std::uint64_t>() + p);
                const double z = (det - est.mean) / est.std_error;
                within += std::abs(z) <= 3.0;
                mc.push_back({{"node", i},
                              {"k", vec_json(grid.node(i), d)},
                              {"C", det},
                              {"mc_mean", est.mean},
                              {"mc_stderr", est.std_error},
                              {"z", z}});
            }
            rep["validate_mc"] = {{"samples", n_mc}, {"points", mc}, {"within_3_sigma", within}};
        }
        return rep;
    };
    return c;
}

inline json spatial_defaults() { return {{"cells", {16, 1, 1}}, {"side", 16.0}}; }

inline Subcommand solve_command()
{
    Subcommand c;
    c.name = "solve";
    c.help = "integrate the kinetic equation from a preset initial state";
    c.defaults = common_defaults({{"model", "continuum"},
                                  {"dim", 3},
                                  {"grid", 6},
                                  {"box", 3.0},
                                  {"collision", "uu"},
                                  {"theta", -1},
                                  {"spectrum", "constant:v=1"},
                                  {"potential", "gaussian:a=1,w=1"},
                                  {"eta", "auto"},
                                  {"n_s", 16},
                                  {"flight", "semi-lagrangian"},
                                  {"snapshot_format", "binary"},
                                  {"initial",
                                   {{"preset", "two-temperature"},
                                    {"T", 0.3},
                                    {"mu", 0.6},
                                    {"drift", {0.0, 0.0, 0.0}},
                                    {"T2", 0.6},
                                    {"mu2", 0.1},
                                    {"drift2", {0.3, 0.0, 0.0}},
                                    {"k0", {1.0, 0.0, 0.0}},
                                    {"sigma_k", 0.5},
                                    {"r0", {8.0, 0.0, 0.0}},
                                    {"sigma_r", 2.0},
                                    {"amplitude", 0.5}}},
                                  {"space", spatial_defaults()},
                                  {"solver", solver_defaults(1.0, 0.5, 1e-7)}});
    c.flags = {{"model", "model"},         {"grid", "grid"},   {"collision", "collision"}, {"theta", "theta"},
               {"tmax", "solver.t_max"}, {"preset", "initial.preset"}};
    c.run = [](const json& cfg, Output& out) {
        struct Setup {
            DispersionModel model;
            GridPtr grid;
            Statistics stats;
            std::optional<CollisionHandle> C;
            SolverConfig sc;
            std::optional<Distribution> W0;
            std::optional<WignerField> F0;
            FlightScheme flight = FlightScheme::SemiLagrangian;
        };
        const auto S = configured("solve setup", [&] {
            Setup s{make_model(cfg), nullptr, stats_of(cfg), std::nullopt, solver_of(cfg.at("solver")), {}, {}, {}};
            const int n = cfg.at("grid").get<int>();
            if (n < 2) throw ConfigError("grid must be at least 2");
            s.grid = make_grid(grid_for(s.model, static_cast<std::size_t>(n), cfg.at("box").get<double>()));
            if (!s.model.on_torus()) s.model = DispersionModel::continuum(s.model.dim(), s.grid->half_width());
            const auto& ini = cfg.at("initial");
            const auto preset = ini.at("preset").get<std::string>();
            const int d = s.model.dim();
            if (preset == "thermal") {
                s.W0 = thermal_distribution(s.model, s.grid, ini.at("T").get<double>(), ini.at("mu").get<double>(), s.stats,
                                            vec_of(ini.at("drift"), "initial.drift"));
            } else if (preset == "two-temperature") {
                const auto a = thermal_distribution(s.model, s.grid, ini.at("T").get<double>(), ini.at("mu").get<double>(),
                                                    s.stats, vec_of(ini.at("drift"), "initial.drift"));
                const auto b = thermal_distribution(s.model, s.grid, ini.at("T2").get<double>(), ini.at("mu2").get<double>(),
                                                    s.stats, vec_of(ini.at("drift2"), "initial.drift2"));
                std::vector<double> v(a.size());
                for (std::size_t i = 0; i < v.size(); ++i) v[i] = 0.5 * (a.values[i] + b.values[i]);
                s.W0 = Distribution(s.grid, v, s.stats);
            } else if (preset == "bump") {
                const auto& sp = cfg.at("space");
                const auto cells = sp.at("cells");
                if (!cells.is_array() || cells.size() != 3) throw ConfigError("space.cells must hold three counts");
                SpatialGrid g;
                g.dim = d;
                for (int j = 0; j < 3; ++j) {
                    const auto m = cells[j].get<long long>();
                    if (m < 1 || (j >= d && m != 1)) throw ConfigError("space.cells entries must be >= 1 (and 1 beyond dim)");
                    g.cells[j] = static_cast<std::size_t>(m);
                }
                const double side = sp.at("side").get<double>();
                if (!(side > 0.0)) throw ConfigError("space.side must be positive");
                g.cell_size = side / static_cast<double>(g.cells[0]);
                const auto kb = momentum_bump(s.grid, s.model, vec_of(ini.at("k0"), "initial.k0"),
                                              ini.at("sigma_k").get<double>(), ini.at("amplitude").get<double>(), s.stats);
                const Vec r0 = vec_of(ini.at("r0"), "initial.r0");
                const double sr = ini.at("sigma_r").get<double>();
                if (!(sr > 0.0)) throw ConfigError("initial.sigma_r must be positive");
                WignerField F(g, s.grid, s.stats);
                for (std::size_t cl = 0; cl < g.size(); ++cl) {
                    const Vec r = g.center(cl);
                    double r2 = 0.0;
                    for (int j = 0; j < d; ++j) {
                        if (g.cells[j] == 1) continue;
                        const double L = g.side(j);
                        const double dr = r[j] - r0[j] - L * std::round((r[j] - r0[j]) / L);
                        r2 += dr * dr;
                    }
                    const double f = std::exp(-0.5 * r2 / (sr * sr));
                    for (std::size_t i = 0; i < s.grid->size(); ++i) F.at(cl, i) = f * kb.values[i];
                }
                s.F0 = std::move(F);
            } else {
                throw ConfigError("initial.preset must be thermal|two-temperature|bump");
            }
            const auto fl = cfg.at("flight").get<std::string>();
            if (fl == "spectral") s.flight = FlightScheme::Spectral;
            else if (fl != "semi-lagrangian") throw ConfigError("flight must be semi-lagrangian|spectral");
            const auto kind = cfg.at("collision").get<std::string>();
            const auto& vals = s.W0 ? s.W0->values : s.F0->values;
            const double E = mean_energy(*s.grid, s.model,
                                         std::span<const double>(vals.data(), s.grid->size()));
            if (kind == "none") {
                s.C = CollisionHandle::none(s.grid, s.model, s.stats);
            } else if (kind == "linear") {
                auto M = std::make_shared<const CollisionMatrix>(
                    s.grid, s.model, Spectrum::parse(cfg.at("spectrum").get<std::string>()), eta_of(cfg, *s.grid, s.model, E));
                s.C = CollisionHandle::linear(M, s.stats);
            } else if (kind == "uu") {
                UuQuadrature q = s.model.on_torus() ? UuQuadrature::smeared(eta_of(cfg, *s.grid, s.model, E))
                                                    : UuQuadrature::sphere(cfg.at("n_s").get<std::size_t>());
                s.C = CollisionHandle::uu(std::make_shared<const UuOperator>(
                    s.grid, s.model, PairPotential::parse(cfg.at("potential").get<std::string>()), s.stats, q));
            } else {
                throw ConfigError("collision must be none|linear|uu");
            }
            return s;
        });
        const auto fmt = cfg.at("snapshot_format").get<std::string>();
        if (fmt != "binary" && fmt != "csv" && fmt != "both") throw ConfigError("snapshot_format must be binary|csv|both");
        const bool bin = fmt != "csv", csv = fmt != "binary";
        const int d = S.model.dim();
        std::vector<std::string> head{"t", "mass"};
        for (int j = 1; j <= d; ++j) head.push_back("p" + std::to_string(j));
        head.push_back("energy");
        head.push_back("entropy");
        json rep;
        if (S.W0) {
            const auto tr = solve_homogeneous(*S.W0, *S.C, S.sc);
            {
                io::CsvWriter w(out.file("moments.csv"), head);
                for (const auto& st : tr.steps) {
                    std::vector<double> row{st.t, st.mass};
                    for (int j = 0; j < d; ++j) row.push_back(st.momentum[j]);
                    row.push_back(st.energy);
                    row.push_back(st.entropy);
                    w.row(row);
                }
            }
            for (std::size_t i = 0; i < tr.snapshots.size(); ++i) {
                const Distribution W(S.grid, tr.snapshots[i], S.stats);
                if (bin) io::write_binary(out.file(indexed("snapshots/snapshot_", i, ".bin")), W);
                if (csv) io::write_csv(out.file(indexed("snapshots/snapshot_", i, ".csv")), W);
            }
            json times = tr.times;
            rep = {{"kind", "homogeneous"},
                   {"collision", to_string(S.C->kind())},
                   {"snapshot_times", times},
                   {"mass_drift", tr.mass_drift},
                   {"momentum_drift", tr.momentum_drift},
                   {"energy_drift", tr.energy_drift},
                   {"min_entropy_increment", tr.min_entropy_increment},
                   {"final_entropy", tr.steps.back().entropy},
                   {"final_moments", moments_json(moments(*S.grid, S.model, tr.snapshots.back()), d)},
                   {"ode", ode_json(tr.ode)}};
        } else {
            InhomogeneousOptions io;
            io.flight = S.flight;
            const auto tr = solve_inhomogeneous(*S.F0, *S.C, S.model, S.sc, io);
            {
                io::CsvWriter w(out.file("moments.csv"), head);
                for (std::size_t s = 0; s < tr.snapshots.size(); ++s) {
                    const auto& F = tr.snapshots[s];
                    Moments tot;
                    double ent = 0.0;
                    for (std::size_t cl = 0; cl < F.cells(); ++cl) {
                        const auto m = moments(*S.grid, S.model, F.cell(cl));
                        tot.mass += m.mass * F.space.cell_volume();
                        for (int j = 0; j < 3; ++j) tot.momentum[j] += m.momentum[j] * F.space.cell_volume();
                        tot.energy += m.energy * F.space.cell_volume();
                        ent += entropy_of(*S.grid, F.cell(cl), S.stats) * F.space.cell_volume();
                    }
                    std::vector<double> row{tr.times[s], tot.mass};
                    for (int j = 0; j < d; ++j) row.push_back(tot.momentum[j]);
                    row.push_back(tot.energy);
                    row.push_back(ent);
                    w.row(row);
                }
            }
            {
                std::vector<std::string> sh{"t", "mass"};
                for (int j = 1; j <= d; ++j) sh.push_back("mean_r" + std::to_string(j));
                for (int j = 1; j <= d; ++j) sh.push_back("var_r" + std::to_string(j));
                io::CsvWriter w(out.file("spatial.csv"), sh);
                for (const auto& r : tr.records) {
                    std::vector<double> row{r.t, r.mass};
                    for (int j = 0; j < d; ++j) row.push_back(r.mean[j]);
                    for (int j = 0; j < d; ++j) row.push_back(r.variance[j]);
                    w.row(row);
                }
            }
            for (std::size_t i = 0; i < tr.snapshots.size(); ++i) {
                if (bin) io::write_binary(out.file(indexed("snapshots/snapshot_", i, ".bin")), tr.snapshots[i]);
                if (csv) io::write_csv(out.file(indexed("snapshots/snapshot_", i, ".csv")), tr.snapshots[i]);
            }
            json times = tr.times;
            rep = {{"kind", "inhomogeneous"},
                   {"collision", to_string(S.C->kind())},
                   {"snapshot_times", times},
                   {"mass_drift", tr.mass_drift},
                   {"steps", tr.steps},
                   {"final_mass", tr.records.back().mass},
                   {"final_variance", vec_json(tr.records.back().variance, d)}};
        }
        out.write_text("moments.gp", gnuplot_script("moments.csv", "entropy", "t", "S", {{d + 4, "entropy"}}));
        return rep;
    };
    return c;
}

inline json diffusion_json(const DiffusionReport& r)
{
    return {{"energy", r.energy},
            {"eta", r.eta},
            {"method", to_string(r.method)},
            {"D", r.D},
            {"D_ce", r.D_ce},
            {"D_gk", r.D_gk},
            {"D_msd", r.D_msd},
            {"band_size", r.band_size},
            {"gap", r.gap},
            {"max_rate", r.max_rate},
            {"deflated", r.deflated},
            {"mean_velocity", r.mean_velocity},
            {"ce_residual", r.ce_residual},
            {"gk_cutoff", r.gk_cutoff},
            {"gk_tail", r.gk_tail},
            {"ce_gk_rel_diff", r.ce_gk_rel_diff},
            {"msd_slope", r.msd_slope},
            {"msd_window_start", r.msd_window_start},
            {"msd_window_end", r.msd_window_end},
            {"msd_mass_drift", r.msd_mass_drift}};
}

inline Subcommand diffusion_command()
{
    Subcommand c;
    c.name = "diffusion";
    c.help = "diffusion coefficient D(E) of the linear kinetic equation (Chapman-Enskog, Green-Kubo, MSD)";
    c.defaults = common_defaults({{"dim", 3},
                                  {"grid", 12},
                                  {"energy", 3.0},
                                  {"eta", "auto"},
                                  {"spectrum", "constant:v=1"},
                                  {"msd", true},
                                  {"msd_cells", 256},
                                  {"ladder", false}});
    c.flags = {{"grid", "grid"}, {"energy", "energy"}, {"eta", "eta"}, {"msd", "msd"}, {"dim", "dim"}};
    c.run = [](const json& cfg, Output& out) {
        const int d = cfg.at("dim").get<int>();
        const double E = cfg.at("energy").get<double>();
        auto [model, M, spectrum] = configured("diffusion setup", [&] {
            if (d < 1 || d > 3) throw ConfigError("dim must be 1, 2 or 3");
            const auto model = DispersionModel::lattice(d);
            const int n = cfg.at("grid").get<int>();
            if (n < 4) throw ConfigError("grid must be at least 4");
            auto grid = make_grid(MomentumGrid::torus(d, static_cast<std::size_t>(n)));
            const auto spectrum = Spectrum::parse(cfg.at("spectrum").get<std::string>());
            auto M = std::make_shared<const CollisionMatrix>(grid, model, spectrum, eta_of(cfg, *grid, model, E));
            return std::tuple{model, M, spectrum};
        });
        const int cells = cfg.at("msd_cells").get<int>();
        if (cells < 16) throw ConfigError("msd_cells must be at least 16");
        auto rep = diffusion_coefficient(*M, model, E, M->eta());
        if (cfg.at("msd").get<bool>()) {
            MsdOptions mo;
            mo.cells = static_cast<std::size_t>(cells);
            rep = msd_diffusion(*M, model, rep, mo);
            rep.method = DiffusionMethod::ChapmanEnskog;
            rep.D = rep.D_ce;
            io::CsvWriter w(out.file("msd.csv"), {"t", "msd"});
            for (std::size_t i = 0; i < rep.msd_times.size(); ++i) w.row({rep.msd_times[i], rep.msd_values[i]});
            out.write_text("msd.gp", gnuplot_script("msd.csv", "mean square displacement", "t", "msd", {{2, "msd"}}));
        }
        json j = diffusion_json(rep);
        if (cfg.at("msd").get<bool>()) {
            j["msd_vs_2dD_rel_diff"] = std::abs(rep.msd_slope - 2.0 * d * rep.D_ce) / (2.0 * d * rep.D_ce);
            j["msd_vs_ce_rel_diff"] = std::abs(rep.D_msd - rep.D_ce) / rep.D_ce;
        }
        if (cfg.at("ladder").get<bool>()) {
            const auto lad = diffusion_eta_ladder(M->grid(), model, spectrum, E);
            json rungs = json::array();
            for (const auto& r : lad.reports) rungs.push_back(diffusion_json(r));
            j["ladder"] = {{"spacing", lad.spacing},
                           {"eta", lad.eta},
                           {"rungs", rungs},
                           {"extrapolated", lad.extrapolated},
                           {"extrapolated_flag", lad.extrapolated_flag}};
        }
        return j;
    };
    return c;
}

inline Subcommand validate_anderson_command()
{
    Subcommand c;
    c.name = "validate-anderson";
    c.help = "compare disorder-averaged lattice Schroedinger evolution with the linear kinetic equation";
    c.defaults = common_defaults({{"dim", 3},
                                  {"L", 32},
                                  {"epsilons", {0.5, 0.25, 0.125}},
                                  {"taus", {0.5, 1.0}},
                                  {"n_real", 50},
                                  {"law", "gaussian"},
                                  {"phase_draws", 1},
                                  {"dt", 0.0},
                                  {"budget", 2e6},
                                  {"eta", "auto"},
                                  {"initial", {{"k0", {1.6, 1.0, 0.5}}, {"sigma_k", 0.4}}},
                                  {"self_averaging", {{"enabled", false}, {"side", 2.0}}},
                                  {"snapshots", false}});
    c.flags = {{"L", "L"}, {"n-real", "n_real"}, {"dim", "dim"}, {"phase-draws", "phase_draws"}};
    c.run = [](const json& cfg, Output& out) {
        struct Setup {
            DisorderEnsemble ens;
            std::vector<double> eps, taus;
            Distribution W0;
            KineticComparisonOptions opt;
        };
        const auto S = configured("validate-anderson setup", [&] {
            Setup s;
            s.ens.dim = cfg.at("dim").get<int>();
            s.ens.L = cfg.at("L").get<std::size_t>();
            s.ens.n_real = cfg.at("n_real").get<std::size_t>();
            s.ens.law = disorder_law_from_string(cfg.at("law").get<std::string>());
            s.ens.seed = cfg.at("seed").get<std::uint64_t>();
            s.eps = cfg.at("epsilons").get<std::vector<double>>();
            s.taus = cfg.at("taus").get<std::vector<double>>();
            if (s.eps.empty()) throw ConfigError("epsilons must not be empty");
            s.ens.epsilon = s.eps.front();
            s.ens.validate();
            const auto model = DispersionModel::lattice(s.ens.dim);
            auto grid = make_grid(MomentumGrid::torus(s.ens.dim, s.ens.L));
            const auto& ini = cfg.at("initial");
            s.W0 = momentum_bump(grid, model, vec_of(ini.at("k0"), "initial.k0"), ini.at("sigma_k").get<double>(), 1.0,
                                 Statistics::Boltzmann);
            s.opt.micro.phase_draws = cfg.at("phase_draws").get<std::size_t>();
            s.opt.micro.dt = cfg.at("dt").get<double>();
            s.opt.micro.budget = cfg.at("budget").get<double>();
            if (cfg.at("eta").is_number()) s.opt.eta = eta_of(cfg, *grid, model, 0.0);
            else if (cfg.at("eta").get<std::string>() != "auto") throw ConfigError("eta must be a positive number or \"auto\"");
            const auto& sa = cfg.at("self_averaging");
            if (sa.at("enabled").get<bool>()) {
                ObservableWindow w;
                w.side = sa.at("side").get<double>();
                w.momentum = [](const Vec& k) { return k[0] > 0.0; };
                s.opt.window = w;
            }
            s.opt.keep_distributions = cfg.at("snapshots").get<bool>();
            // refuse before any evolution when the deepest rung is over budget
            for (double e : s.eps)
                for (double t : s.taus) {
                    DisorderEnsemble probe = s.ens;
                    probe.epsilon = e;
                    if (!(e > 0.0)) throw ConfigError("epsilons must be positive");
                    const double cost = microscopic_cost(probe, t / e, detail::budget_dt(probe, s.opt.micro.dt),
                                                         s.opt.micro.phase_draws);
                    if (cost > s.opt.micro.budget)
                        throw BudgetExceeded("eps=" + std::to_string(e) + ", tau=" + std::to_string(t) + " needs ~"
                                             + std::to_string(cost) + " FFT passes (budget "
                                             + std::to_string(s.opt.micro.budget) + ")");
                }
            return s;
        });
        const auto rep = kinetic_comparison(S.ens, S.eps, S.W0, S.taus, S.opt);
        {
            io::CsvWriter w(out.file("distances.csv"),
                            {"epsilon", "tau", "distance", "stat_error", "noise_floor", "inconclusive"});
            for (std::size_t e = 0; e < rep.epsilons.size(); ++e)
                for (std::size_t t = 0; t < rep.taus.size(); ++t)
                    w.row({rep.epsilons[e], rep.taus[t], rep.distance[e][t], rep.stat_error[e][t], rep.noise_floor[e][t],
                           rep.inconclusive[e][t] ? 1.0 : 0.0});
        }
        {
            std::ostringstream s;
            s << "set datafile separator ','\nset logscale xy\nset xlabel 'epsilon'\nset ylabel 'L1 distance'\n"
              << "set title 'microscopic vs kinetic'\nplot ";
            for (std::size_t t = 0; t < rep.taus.size(); ++t)
                s << (t ? ", \\\n     " : "") << "'distances.csv' using ($2==" << io::fmt(rep.taus[t])
                  << " ? $1 : 1/0):3:4 with yerrorlines title 'tau=" << io::fmt(rep.taus[t]) << "'";
            s << "\npause -1\n";
            out.write_text("distances.gp", s.str());
        }
        if (S.opt.keep_distributions) {
            for (std::size_t t = 0; t < rep.taus.size(); ++t) {
                io::write_csv(out.file(indexed("snapshots/kinetic_tau", t, ".csv")), rep.kinetic[t]);
                for (std::size_t e = 0; e < rep.epsilons.size(); ++e)
                    io::write_csv(out.file(indexed("snapshots/micro_eps" + std::to_string(e) + "_tau", t, ".csv")),
                                  rep.micro[e][t]);
            }
        }
        json dec = json::array();
        for (bool b : rep.decreasing) dec.push_back(b);
        json inc = json::array();
        for (const auto& row : rep.inconclusive) {
            json r = json::array();
            for (bool b : row) r.push_back(b);
            inc.push_back(r);
        }
        json j{{"epsilons", rep.epsilons},
               {"taus", rep.taus},
               {"distance", rep.distance},
               {"stat_error", rep.stat_error},
               {"noise_floor", rep.noise_floor},
               {"inconclusive", inc},
               {"decreasing", dec},
               {"all_decreasing", rep.all_decreasing()},
               {"any_inconclusive", rep.any_inconclusive()},
               {"eta", rep.eta},
               {"mass", rep.mass},
               {"realizations", rep.realizations},
               {"phase_draws", rep.phase_draws}};
        if (!rep.variances.empty()) j["self_averaging_variances"] = rep.variances;
        return j;
    };
    return c;
}

inline Subcommand quasifree_moment_command()
{
    Subcommand c;
    c.name = "quasifree-moment";
    c.help = "moment <a*_1..a*_m a_m..a_1> of a quasifree state (determinant or permanent of the correlation matrix)";
    c.defaults = common_defaults({{"theta", -1}, {"matrix", json::array()}, {"matrix_imag", json::array()}, {"size", 3}});
    c.flags = {{"theta", "theta"}, {"size", "size"}};
    c.run = [](const json& cfg, Output&) {
        const auto cm = configured("quasifree-moment setup", [&] {
            CorrelationMatrix m;
            m.stats = stats_of(cfg);
            if (m.stats == Statistics::Boltzmann) throw ConfigError("quasifree moments need theta = -1 or +1");
            const auto& re = cfg.at("matrix");
            const auto& im = cfg.at("matrix_imag");
            if (!re.empty()) {
                const auto n = static_cast<Eigen::Index>(re.size());
                m.C = Eigen::MatrixXcd::Zero(n, n);
                for (Eigen::Index i = 0; i < n; ++i) {
                    if (!re[i].is_array() || static_cast<Eigen::Index>(re[i].size()) != n)
                        throw ConfigError("matrix must be square");
                    for (Eigen::Index j = 0; j < n; ++j) {
                        double y = 0.0;
                        if (!im.empty()) {
                            if (static_cast<Eigen::Index>(im.size()) != n || static_cast<Eigen::Index>(im[i].size()) != n)
                                throw ConfigError("matrix_imag must match matrix");
                            y = im[i][j].get<double>();
                        }
                        m.C(i, j) = cplx(re[i][j].get<double>(), y);
                    }
                }
            } else {
                // random admissible correlation matrix: U diag(lambda) U*
                const int n = cfg.at("size").get<int>();
                if (n < 1 || n > static_cast<int>(permanent_max_size)) throw ConfigError("size out of range");
                auto rng = make_stream(cfg.at("seed").get<std::uint64_t>(), 0x716d6f);
                std::normal_distribution<double> g;
                std::uniform_real_distribution<double> u(0.05, m.stats == Statistics::Fermion ? 0.95 : 2.0);
                Eigen::MatrixXcd Z(n, n);
                for (int i = 0; i < n; ++i)
                    for (int j = 0; j < n; ++j) Z(i, j) = cplx(g(rng), g(rng));
                const Eigen::MatrixXcd Q = Eigen::HouseholderQR<Eigen::MatrixXcd>(Z).householderQ();
                Eigen::VectorXd lam(n);
                for (int i = 0; i < n; ++i) lam(i) = u(rng);
                m.C = Q * lam.cast<cplx>().asDiagonal() * Q.adjoint();
            }
            validate(m);
            return m;
        });
        const cplx v = quasifree_moment(cm);
        json re = json::array(), im = json::array();
        for (Eigen::Index i = 0; i < cm.C.rows(); ++i) {
            json r = json::array(), s = json::array();
            for (Eigen::Index j = 0; j < cm.C.cols(); ++j) {
                r.push_back(cm.C(i, j).real());
                s.push_back(cm.C(i, j).imag());
            }
            re.push_back(r);
            im.push_back(s);
        }
        return json{{"size", cm.size()},
                    {"theta", static_cast<int>(theta_of(cm.stats))},
                    {"method", cm.stats == Statistics::Fermion ? "determinant" : "permanent"},
                    {"moment", {v.real(), v.imag()}},
                    {"matrix", re},
                    {"matrix_imag", im}};
    };
    return c;
}

inline std::vector<Subcommand> subcommands()
{
    return {dispersion_decay_command(), linear_relax_command(),     uu_apply_command(),       solve_command(),
            diffusion_command(),        validate_anderson_command(), quasifree_moment_command()};
}

// ---------------------------------------------------------------------------

/// Writes the fault report (and the last admissible state when one is
/// attached) and returns the path of the report.
inline std::string write_fault(const fs::path& dir, const std::string& what, const NumericalFault* nf)
{
    fs::create_directories(dir);
    json j{{"error", what}};
    if (nf) {
        j["time"] = nf->time;
        if (!nf->snapshot.empty()) {
            const auto p = (dir / "fault_snapshot.csv").string();
            io::CsvWriter w(p, {"index", "W"});
            for (std::size_t i = 0; i < nf->snapshot.size(); ++i) w.row({static_cast<double>(i), nf->snapshot[i]});
            j["snapshot"] = "fault_snapshot.csv";
        }
    }
    const auto path = (dir / "fault.json").string();
    std::ofstream out(path);
    out << j.dump(2) << '\n';
    return path;
}

/// Entry point: 0 success, 1 numerical or runtime failure, 2 configuration error.
inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr)
{
    CLI::App app{"qkin: kinetic equations for quantum many-particle dynamics", "qkin"};
    app.require_subcommand(1);
    auto cmds = subcommands();
    struct Bound {
        std::string config;
        std::optional<std::uint64_t> seed;
        std::optional<int> threads;
        std::optional<std::string> outdir;
        std::vector<std::string> sets;
        std::map<std::string, std::string> flags;
    };
    std::vector<Bound> bound(cmds.size());
    std::vector<CLI::App*> subs;
    for (std::size_t i = 0; i < cmds.size(); ++i) {
        auto* s = app.add_subcommand(cmds[i].name, cmds[i].help);
        auto& b = bound[i];
        s->add_option("--config", b.config, "JSON config file");
        s->add_option("--seed", b.seed, "master seed (overrides the config)");
        s->add_option("--threads", b.threads, "worker count (QKIN_THREADS takes precedence)");
        s->add_option("--outdir", b.outdir, "output directory");
        s->add_option("--set", b.sets, "override any config key: path.to.key=value")->allow_extra_args(false);
        for (const auto& [flag, key] : cmds[i].flags)
            s->add_option_function<std::string>(
                "--" + flag, [&b, key = key](const std::string& v) { b.flags[key] = v; }, "sets '" + key + "'");
        subs.push_back(s);
    }
    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        out << app.help();
        return 0;
    } catch (const CLI::CallForAllHelp& e) {
        out << app.help("", CLI::AppFormatMode::All);
        return 0;
    } catch (const CLI::ParseError& e) {
        err << "qkin: " << e.what() << '\n';
        return 2;
    }
    std::size_t which = 0;
    while (which < subs.size() && !subs[which]->parsed()) ++which;
    const auto& cmd = cmds[which];
    const auto& b = bound[which];

    json cfg = cmd.defaults;
    try {
        if (!b.config.empty()) {
            std::string text;
            json user = load_config_file(b.config, text);
            // a resolved-config.json from an earlier run is accepted as is
            if (user.is_object() && user.contains("subcommand") && user.contains("config")) {
                if (user.at("subcommand") != cmd.name)
                    throw ConfigError(b.config + ": written by '" + user.at("subcommand").dump() + "', not '" + cmd.name + "'");
                user = json(user.at("config"));
            }
            merge(cfg, user, "", b.config, text);
            const fs::path base = fs::absolute(fs::path(b.config)).parent_path();
            for (const auto& k : path_keys())
                if (user.contains(k) && cfg[k].is_string() && !cfg[k].get<std::string>().empty()
                    && fs::path(cfg[k].get<std::string>()).is_relative())
                    cfg[k] = (base / cfg[k].get<std::string>()).lexically_normal().string();
        }
        for (const auto& [key, raw] : b.flags) apply_override(cfg, key, raw, "--" + key);
        for (const auto& s : b.sets) {
            const auto eq = s.find('=');
            if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + s + "'");
            apply_override(cfg, s.substr(0, eq), s.substr(eq + 1), "--set");
        }
        if (b.seed) cfg["seed"] = *b.seed;
        if (b.threads) cfg["threads"] = *b.threads;
        if (b.outdir) cfg["output_dir"] = *b.outdir;
        if (cfg.at("threads").get<int>() < 0) throw ConfigError("threads must be nonnegative");
        if (cfg.at("output_dir").get<std::string>().empty()) throw ConfigError("output_dir must not be empty");
    } catch (const ConfigError& e) {
        err << "qkin " << cmd.name << ": config error: " << e.what() << '\n';
        return 2;
    } catch (const json::exception& e) {
        err << "qkin " << cmd.name << ": config error: " << e.what() << '\n';
        return 2;
    }

    if (!std::getenv("QKIN_THREADS") && cfg.at("threads").get<int>() > 0)
        set_worker_count(static_cast<unsigned>(cfg.at("threads").get<int>()));

    const fs::path dir(cfg.at("output_dir").get<std::string>());
    try {
        Output o(dir);
        o.write_json("resolved-config.json", json{{"subcommand", cmd.name}, {"config", cfg}});
        const json report = cmd.run(cfg, o);
        o.write_json("report.json", report);
        o.write_manifest();
        out << "qkin " << cmd.name << ": wrote " << (dir / "report.json").string() << '\n';
        return 0;
    } catch (const ConfigError& e) {
        err << "qkin " << cmd.name << ": config error: " << e.what() << '\n';
        return 2;
    } catch (const BudgetExceeded& e) {
        err << "qkin " << cmd.name << ": config error: over budget: " << e.what() << '\n';
        return 2;
    } catch (const json::exception& e) {
        err << "qkin " << cmd.name << ": config error: " << e.what() << '\n';
        return 2;
    } catch (const NumericalFault& e) {
        const auto p = write_fault(dir, e.what(), &e);
        err << "qkin " << cmd.name << ": numerical failure: " << e.what() << "\n  diagnostic snapshot: " << p << '\n';
        return 1;
    } catch (const std::exception& e) {
        std::string p;
        try {
            p = write_fault(dir, e.what(), nullptr);
        } catch (...) {
        }
        err << "qkin " << cmd.name << ": failure: " << e.what() << (p.empty() ? "" : "\n  diagnostic: " + p) << '\n';
        return 1;
    }
}

} // namespace qkin::cli

#endif // QKIN_TOOLS_CLI_HPP
