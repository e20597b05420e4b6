#ifndef QKIN_IO_HPP
#define QKIN_IO_HPP

#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

#include <nlohmann/json.hpp>

#include "grids.hpp"

namespace qkin::io {

using nlohmann::json;

/// Round-trip exact decimal form of a double.
inline std::string fmt(double x)
{
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", x);
    return buf;
}

class CsvWriter {
public:
    CsvWriter(const std::string& path, const std::vector<std::string>& header) : out_(path)
    {
        if (!out_) throw Error("cannot open " + path + " for writing");
        for (std::size_t i = 0; i < header.size(); ++i) out_ << (i ? "," : "") << header[i];
        out_ << '\n';
    }
    void row(std::initializer_list<double> v) { row(std::vector<double>(v)); }
    void row(const std::vector<double>& v)
    {
        for (std::size_t i = 0; i < v.size(); ++i) out_ << (i ? "," : "") << fmt(v[i]);
        out_ << '\n';
    }

private:
    std::ofstream out_;
};

struct CsvTable {
    std::vector<std::string> header;
    std::vector<std::vector<double>> rows;

    std::size_t column(const std::string& name) const
    {
        for (std::size_t i = 0; i < header.size(); ++i)
            if (header[i] == name) return i;
        throw Error("csv column '" + name + "' not found");
    }
};

inline CsvTable read_csv(const std::string& path)
{
    std::ifstream in(path);
    if (!in) throw Error("cannot open " + path);
    CsvTable t;
    std::string line;
    if (!std::getline(in, line)) throw Error(path + ": empty csv");
    {
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) t.header.push_back(cell);
    }
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::vector<double> r;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) {
            char* end = nullptr;
            const double v = std::strtod(cell.c_str(), &end);
            if (end == cell.c_str()) throw Error(path + ":" + std::to_string(lineno) + ": not a number: '" + cell + "'");
            r.push_back(v);
        }
        if (r.size() != t.header.size())
            throw Error(path + ":" + std::to_string(lineno) + ": expected " + std::to_string(t.header.size()) + " fields");
        t.rows.push_back(std::move(r));
    }
    return t;
}

// ---------------------------------------------------------------------------
// CSV form: columns k1..kd,[r1..rd],W; one row per (cell, node), node fastest.

inline std::vector<std::string> field_header(int d, bool with_r)
{
    std::vector<std::string> h;
    for (int j = 1; j <= d; ++j) h.push_back("k" + std::to_string(j));
    if (with_r)
        for (int j = 1; j <= d; ++j) h.push_back("r" + std::to_string(j));
    h.push_back("W");
    return h;
}

inline void write_csv(const std::string& path, const MomentumGrid& grid, std::span<const double> values)
{
    const int d = grid.dim();
    CsvWriter w(path, field_header(d, false));
    std::vector<double> row(d + 1);
    for (std::size_t i = 0; i < grid.size(); ++i) {
        for (int j = 0; j < d; ++j) row[j] = grid.node(i)[j];
        row[d] = values[i];
        w.row(row);
    }
}

inline void write_csv(const std::string& path, const Distribution& W) { write_csv(path, *W.grid, W.values); }

inline void write_csv(const std::string& path, const WignerField& F)
{
    const int d = F.grid->dim();
    CsvWriter w(path, field_header(d, true));
    std::vector<double> row(2 * d + 1);
    for (std::size_t c = 0; c < F.cells(); ++c) {
        const Vec r = F.space.center(c);
        for (std::size_t i = 0; i < F.nodes(); ++i) {
            for (int j = 0; j < d; ++j) {
                row[j] = F.grid->node(i)[j];
                row[d + j] = r[j];
            }
            row[2 * d] = F.at(c, i);
            w.row(row);
        }
    }
}

/// Reads a distribution written by write_csv. The grid kind follows the
/// dispersion model (torus for lattice and phonon kinds, box for the
/// continuum); points per axis and box width are recovered from the nodes.
inline Distribution read_distribution_csv(const std::string& path, const DispersionModel& model, Statistics stats)
{
    const auto t = read_csv(path);
    const int d = model.dim();
    if (t.header != field_header(d, false))
        throw Error(path + ": header does not match a " + std::to_string(d) + "-dimensional distribution");
    const std::size_t total = t.rows.size();
    const auto n = static_cast<std::size_t>(std::llround(std::pow(static_cast<double>(total), 1.0 / d)));
    std::size_t check = 1;
    for (int j = 0; j < d; ++j) check *= n;
    if (check != total || n < 2) throw Error(path + ": row count " + std::to_string(total) + " is not n^d");
    MomentumGrid g = model.on_torus() ? MomentumGrid::torus(d, n) : [&] {
        double kmax = 0.0;
        for (const auto& r : t.rows) kmax = std::max(kmax, std::abs(r[d - 1]));
        // nodes sit at cell midpoints: kmax = K - h/2 = K (1 - 1/n)
        return MomentumGrid::box(d, n, kmax / (1.0 - 1.0 / static_cast<double>(n)));
    }();
    std::vector<double> v(total);
    for (std::size_t i = 0; i < total; ++i) {
        for (int j = 0; j < d; ++j)
            if (std::abs(t.rows[i][j] - g.node(i)[j]) > 1e-9 * (1.0 + std::abs(g.node(i)[j])))
                throw Error(path + ": row " + std::to_string(i + 2) + " is not on the expected grid");
        v[i] = t.rows[i][d];
    }
    Distribution W(make_grid(std::move(g)), std::move(v), stats);
    check_admissible(W);
    return W;
}

// ---------------------------------------------------------------------------
// Binary form: one line of compact JSON describing the payload, followed by
// the raw little-endian float64 values.

inline json grid_json(const MomentumGrid& g)
{
    json j{{"kind", g.kind() == GridKind::TorusUniform ? "torus" : "box"},
           {"dim", g.dim()},
           {"points_per_axis", g.points_per_axis()}};
    if (g.kind() == GridKind::BoxUniform) j["half_width"] = g.half_width();
    if (!g.is_product()) j["subset"] = g.parent_index();
    return j;
}

inline MomentumGrid grid_from_json(const json& j)
{
    const int d = j.at("dim").get<int>();
    const auto n = j.at("points_per_axis").get<std::size_t>();
    MomentumGrid g = j.at("kind").get<std::string>() == "torus" ? MomentumGrid::torus(d, n)
                                                                 : MomentumGrid::box(d, n, j.at("half_width").get<double>());
    if (j.contains("subset")) g = g.subset(j.at("subset").get<std::vector<std::size_t>>());
    return g;
}

namespace detail {
inline void write_payload(std::ostream& out, std::span<const double> v)
{
    if constexpr (std::endian::native == std::endian::little) {
        out.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(double)));
    } else {
        for (double x : v) {
            char b[8];
            std::memcpy(b, &x, 8);
            std::reverse(b, b + 8);
            out.write(b, 8);
        }
    }
}

inline std::vector<double> read_payload(std::istream& in, std::size_t count)
{
    std::vector<double> v(count);
    in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(count * sizeof(double)));
    if (!in) throw Error("binary payload truncated");
    if constexpr (std::endian::native != std::endian::little) {
        for (double& x : v) {
            char b[8];
            std::memcpy(b, &x, 8);
            std::reverse(b, b + 8);
            std::memcpy(&x, b, 8);
        }
    }
    return v;
}
} // namespace detail

inline void write_binary(const std::string& path, const Distribution& W)
{
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot open " + path + " for writing");
    json h{{"format", "qkin-field"},
           {"version", 1},
           {"type", "distribution"},
           {"grid", grid_json(*W.grid)},
           {"statistics", static_cast<int>(W.stats)},
           {"count", W.values.size()},
           {"dtype", "float64"},
           {"endianness", "little"},
           {"layout", "row-major, last momentum axis fastest"}};
    out << h.dump() << '\n';
    detail::write_payload(out, W.values);
}

inline void write_binary(const std::string& path, const WignerField& F)
{
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot open " + path + " for writing");
    json h{{"format", "qkin-field"},
           {"version", 1},
           {"type", "wigner"},
           {"grid", grid_json(*F.grid)},
           {"space",
            {{"dim", F.space.dim},
             {"cells", {F.space.cells[0], F.space.cells[1], F.space.cells[2]}},
             {"cell_size", F.space.cell_size}}},
           {"statistics", static_cast<int>(F.stats)},
           {"count", F.values.size()},
           {"dtype", "float64"},
           {"endianness", "little"},
           {"layout", "row-major (cell, node), momentum index fastest"}};
    out << h.dump() << '\n';
    detail::write_payload(out, F.values);
}

inline json read_binary_header(std::istream& in)
{
    std::string line;
    if (!std::getline(in, line)) throw Error("missing binary header");
    json h = json::parse(line);
    if (h.value("format", "") != "qkin-field") throw Error("not a qkin-field file");
    return h;
}

inline Distribution read_binary_distribution(const std::string& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open " + path);
    const json h = read_binary_header(in);
    if (h.at("type") != "distribution") throw Error(path + ": not a distribution");
    auto g = make_grid(grid_from_json(h.at("grid")));
    auto v = detail::read_payload(in, h.at("count").get<std::size_t>());
    return Distribution(g, std::move(v), statistics_from_theta(h.at("statistics").get<int>()));
}

inline WignerField read_binary_wigner(const std::string& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open " + path);
    const json h = read_binary_header(in);
    if (h.at("type") != "wigner") throw Error(path + ": not a Wigner field");
    SpatialGrid s;
    s.dim = h.at("space").at("dim").get<int>();
    const auto cells = h.at("space").at("cells").get<std::vector<std::size_t>>();
    for (int j = 0; j < 3; ++j) s.cells[j] = cells.at(j);
    s.cell_size = h.at("space").at("cell_size").get<double>();
    WignerField F(s, make_grid(grid_from_json(h.at("grid"))), statistics_from_theta(h.at("statistics").get<int>()));
    F.values = detail::read_payload(in, h.at("count").get<std::size_t>());
    if (F.values.size() != F.cells() * F.nodes()) throw Error(path + ": payload size mismatch");
    return F;
}

} // namespace qkin::io

#endif // QKIN_IO_HPP
