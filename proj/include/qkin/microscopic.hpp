#ifndef QKIN_MICROSCOPIC_HPP
#define QKIN_MICROSCOPIC_HPP

#include <complex>
#include <functional>
#include <memory>
#include <optional>

#include <fftw3.h>

#include "transport.hpp"

namespace qkin {

using cplx = std::complex<double>;

enum class DisorderLaw { GaussianUnit, UniformUnit };

inline std::string to_string(DisorderLaw l) { return l == DisorderLaw::GaussianUnit ? "gaussian" : "uniform"; }

inline DisorderLaw disorder_law_from_string(const std::string& s)
{
    if (s == "gaussian") return DisorderLaw::GaussianUnit;
    if (s == "uniform") return DisorderLaw::UniformUnit;
    throw ConfigError("unknown disorder law '" + s + "' (expected gaussian|uniform)");
}

/// i.i.d. on-site disorder of mean 0 and variance 1 on the periodic L^d
/// lattice, coupled with strength sqrt(epsilon).
struct DisorderEnsemble {
    int dim = 3;
    std::size_t L = 32;
    double epsilon = 0.25;
    DisorderLaw law = DisorderLaw::GaussianUnit;
    std::uint64_t seed = 1;
    std::size_t n_real = 50;

    std::size_t sites() const
    {
        std::size_t n = 1;
        for (int j = 0; j < dim; ++j) n *= L;
        return n;
    }
    void validate() const
    {
        if (dim < 1 || dim > 3) throw DomainError("lattice dimension must be 1, 2 or 3");
        if (L < 2) throw DomainError("lattice side must be at least 2");
        if (L % 2 != 0) throw DomainError("lattice side must be even");
        if (!(epsilon >= 0.0)) throw DomainError("coupling epsilon must be nonnegative");
        if (n_real == 0) throw DomainError("ensemble needs at least one realization");
    }
};

inline constexpr std::uint64_t disorder_tag = 0x646973;  // "dis"
inline constexpr std::uint64_t phase_tag = 0x706861;     // "pha"

/// Potential of realization r; a pure function of (seed, r).
inline std::vector<double> sample_potential(const DisorderEnsemble& ens, std::size_t r)
{
    ens.validate();
    if (r >= ens.n_real)
        throw ContractViolation("realization " + std::to_string(r) + " out of range (n_real = " + std::to_string(ens.n_real)
                                + ")");
    auto rng = make_stream(ens.seed, disorder_tag, r);
    std::vector<double> V(ens.sites());
    if (ens.law == DisorderLaw::GaussianUnit) {
        std::normal_distribution<double> g(0.0, 1.0);
        for (auto& v : V) v = g(rng);
    } else {
        const double a = std::sqrt(3.0);
        std::uniform_real_distribution<double> u(-a, a);
        for (auto& v : V) v = u(rng);
    }
    return V;
}

// ---------------------------------------------------------------------------

/// Complex amplitudes on the L^d torus, row-major in the site index.
struct LatticeWavefunction {
    int dim = 3;
    std::size_t L = 32;
    std::vector<cplx> psi;

    double norm() const
    {
        std::vector<double> a(psi.size());
        for (std::size_t i = 0; i < psi.size(); ++i) a[i] = std::norm(psi[i]);
        return std::sqrt(pairwise_sum(a));
    }
};

/// Unitary d-dimensional FFT on the L^d lattice; plans are shared by all
/// threads through the new-array execute interface.
class LatticeFft {
public:
    LatticeFft(int dim, std::size_t L) : dim_(dim), L_(L)
    {
        n_ = 1;
        std::vector<int> dims(static_cast<std::size_t>(dim), static_cast<int>(L));
        for (int j = 0; j < dim; ++j) n_ *= L;
        std::vector<cplx> buf(n_);
        auto* p = reinterpret_cast<fftw_complex*>(buf.data());
        std::lock_guard<std::mutex> lock(detail::fftw_planner_mutex());
        fwd_ = fftw_plan_dft(dim, dims.data(), p, p, FFTW_FORWARD, FFTW_ESTIMATE | FFTW_UNALIGNED);
        bwd_ = fftw_plan_dft(dim, dims.data(), p, p, FFTW_BACKWARD, FFTW_ESTIMATE | FFTW_UNALIGNED);
        if (!fwd_ || !bwd_) throw NumericalFault("FFTW planning failed");
    }
    ~LatticeFft()
    {
        std::lock_guard<std::mutex> lock(detail::fftw_planner_mutex());
        fftw_destroy_plan(fwd_);
        fftw_destroy_plan(bwd_);
    }
    LatticeFft(const LatticeFft&) = delete;
    LatticeFft& operator=(const LatticeFft&) = delete;

    std::size_t size() const { return n_; }
    int dim() const { return dim_; }
    std::size_t side() const { return L_; }

    /// psi_hat(k) = N^{-1/2} sum_x psi(x) e^{-i k x}, in place.
    void forward(std::vector<cplx>& a) const { run(fwd_, a); }
    void backward(std::vector<cplx>& a) const { run(bwd_, a); }

    /// Index of the grid node (MomentumGrid torus ordering, k from -pi) that
    /// holds FFT mode m.
    std::vector<std::size_t> node_of_mode() const
    {
        std::vector<std::size_t> out(n_);
        for (std::size_t m = 0; m < n_; ++m) {
            std::size_t rest = m, idx = 0, stride = 1;
            for (int j = dim_ - 1; j >= 0; --j) {
                const std::size_t mj = rest % L_;
                rest /= L_;
                idx += ((mj + L_ / 2) % L_) * stride;
                stride *= L_;
            }
            out[m] = idx;
        }
        return out;
    }

    /// Wavevector of FFT mode m, components in [-pi, pi).
    Vec mode_k(std::size_t m) const
    {
        Vec k{0.0, 0.0, 0.0};
        std::size_t rest = m;
        for (int j = dim_ - 1; j >= 0; --j) {
            const std::size_t mj = rest % L_;
            rest /= L_;
            const double a = static_cast<double>((mj + L_ / 2) % L_) - static_cast<double>(L_ / 2);
            k[j] = two_pi / static_cast<double>(L_) * a;
        }
        return k;
    }

private:
    void run(fftw_plan p, std::vector<cplx>& a) const
    {
        require(a.size() == n_, "lattice FFT: size mismatch");
        auto* z = reinterpret_cast<fftw_complex*>(a.data());
        fftw_execute_dft(p, z, z);
        const double s = 1.0 / std::sqrt(static_cast<double>(n_));
        for (auto& x : a) x *= s;
    }

    int dim_;
    std::size_t L_;
    std::size_t n_ = 1;
    fftw_plan fwd_ = nullptr;
    fftw_plan bwd_ = nullptr;
};

/// Largest step allowed by the resolution rule dt <= 0.1 / max(d, sqrt(eps) max|V|).
inline double max_stable_dt(int dim, double epsilon, std::span<const double> V)
{
    double vmax = 0.0;
    for (double v : V) vmax = std::max(vmax, std::abs(v));
    return 0.1 / std::max(static_cast<double>(dim), std::sqrt(epsilon) * vmax);
}

/// <psi|H|psi> with H = -Delta/2 (i.e. omega(k) = sum_j (1 - cos k_j)) plus sqrt(eps) V.
inline double lattice_energy(const LatticeWavefunction& w, std::span<const double> V, double epsilon)
{
    const LatticeFft fft(w.dim, w.L);
    auto a = w.psi;
    fft.forward(a);
    const auto model = DispersionModel::lattice(w.dim);
    std::vector<double> t(a.size());
    for (std::size_t m = 0; m < a.size(); ++m) t[m] = model.omega(fft.mode_k(m)) * std::norm(a[m]);
    std::vector<double> p(w.psi.size());
    for (std::size_t x = 0; x < p.size(); ++x) p[x] = std::sqrt(epsilon) * V[x] * std::norm(w.psi[x]);
    return pairwise_sum(t) + pairwise_sum(p);
}

struct EvolveStats {
    std::size_t steps = 0;
    double dt = 0.0;
    double max_norm_drift = 0.0;
};

/// Strang split-step propagation to time t: half potential phase, full
/// kinetic phase e^{-i omega(k) dt} in Fourier space, half potential phase.
/// Consecutive potential half steps are merged. The step is shortened so
/// that an integer number of steps lands on t.
inline LatticeWavefunction evolve(const LatticeWavefunction& psi0, std::span<const double> V, double epsilon, double t,
                                  double dt, const LatticeFft* fft_in = nullptr, EvolveStats* stats = nullptr)
{
    require(psi0.psi.size() == V.size(), "evolve: potential and wavefunction sizes differ");
    if (!(t >= 0.0)) throw DomainError("evolve: time must be nonnegative");
    if (!(dt > 0.0)) throw DomainError("evolve: dt must be positive");
    const double limit = max_stable_dt(psi0.dim, epsilon, V);
    if (dt > limit * (1.0 + 1e-12))
        throw DomainError("evolve: dt=" + std::to_string(dt) + " exceeds the resolution limit " + std::to_string(limit));
    LatticeWavefunction out = psi0;
    if (t == 0.0) return out;
    std::unique_ptr<LatticeFft> own;
    if (!fft_in) own = std::make_unique<LatticeFft>(psi0.dim, psi0.L);
    const LatticeFft& fft = fft_in ? *fft_in : *own;
    const auto steps = static_cast<std::size_t>(std::ceil(t / dt - 1e-9));
    const double h = t / static_cast<double>(steps);
    const double se = std::sqrt(epsilon);
    const auto model = DispersionModel::lattice(psi0.dim);
    std::vector<cplx> half(V.size()), full(V.size()), kin(fft.size());
    for (std::size_t x = 0; x < V.size(); ++x) {
        half[x] = std::polar(1.0, -0.5 * se * V[x] * h);
        full[x] = std::polar(1.0, -se * V[x] * h);
    }
    for (std::size_t m = 0; m < kin.size(); ++m) kin[m] = std::polar(1.0, -model.omega(fft.mode_k(m)) * h);
    auto& a = out.psi;
    const double n0 = psi0.norm();
    double drift = 0.0;
    for (std::size_t x = 0; x < a.size(); ++x) a[x] *= half[x];
    for (std::size_t s = 0; s < steps; ++s) {
        fft.forward(a);
        for (std::size_t m = 0; m < a.size(); ++m) a[m] *= kin[m];
        fft.backward(a);
        const auto& ph = s + 1 == steps ? half : full;
        for (std::size_t x = 0; x < a.size(); ++x) a[x] *= ph[x];
        const double d = std::abs(out.norm() - n0);
        drift = std::max(drift, d);
        if (!(d <= 1e-9))
            throw NumericalFault("evolve: norm drift " + std::to_string(d) + " at step " + std::to_string(s), {},
                                 static_cast<double>(s + 1) * h);
    }
    if (stats) *stats = EvolveStats{steps, h, drift};
    return out;
}

/// |psi_hat(k)|^2 in MomentumGrid node order.
inline std::vector<double> momentum_distribution(const LatticeWavefunction& w, const LatticeFft& fft)
{
    auto a = w.psi;
    fft.forward(a);
    const auto node = fft.node_of_mode();
    std::vector<double> out(a.size());
    for (std::size_t m = 0; m < a.size(); ++m) out[node[m]] = std::norm(a[m]);
    return out;
}

/// psi_hat(k) = sqrt(W0(k) / sum W0) e^{i phi_k} with i.i.d. uniform phases.
/// W0 lives on the torus grid with L points per axis.
inline LatticeWavefunction random_phase_state(const Distribution& W0, std::uint64_t seed, std::uint64_t stream = 0,
                                              const LatticeFft* fft_in = nullptr)
{
    require(W0.grid != nullptr && W0.grid->kind() == GridKind::TorusUniform && W0.grid->is_product(),
            "random_phase_state needs a torus product grid");
    const int d = W0.grid->dim();
    const std::size_t L = W0.grid->points_per_axis();
    if (L % 2 != 0) throw DomainError("random_phase_state needs an even lattice side");
    double total = 0.0;
    for (double w : W0.values) {
        if (!(w >= 0.0)) throw InvariantViolation("random_phase_state: W0 must be nonnegative");
        total += w;
    }
    if (!(total > 0.0)) throw InvariantViolation("random_phase_state: W0 vanishes everywhere");
    std::unique_ptr<LatticeFft> own;
    if (!fft_in) own = std::make_unique<LatticeFft>(d, L);
    const LatticeFft& fft = fft_in ? *fft_in : *own;
    const auto node = fft.node_of_mode();
    auto rng = make_stream(seed, phase_tag, stream);
    std::uniform_real_distribution<double> u(0.0, two_pi);
    LatticeWavefunction w{d, L, std::vector<cplx>(fft.size())};
    for (std::size_t m = 0; m < fft.size(); ++m) {
        const double phi = u(rng);
        w.psi[m] = std::polar(std::sqrt(W0.values[node[m]] / total), phi);
    }
    fft.backward(w.psi);
    return w;
}

// ---------------------------------------------------------------------------

struct MicroscopicOptions {
    /// Step; 0 picks half the resolution limit of each realization.
    double dt = 0.0;
    std::size_t phase_draws = 1;
    /// Cost ceiling in units of one lattice-size complex FFT pass
    /// (N log2 N butterflies).
    double budget = 2e6;
};

struct AveragedDistribution {
    Distribution mean;
    std::vector<double> std_error;  ///< per node, across realizations
    std::size_t realizations = 0;
    std::size_t phase_draws = 0;
    double horizon = 0.0;  ///< microscopic time tau / epsilon
    double cost = 0.0;
};

inline double microscopic_cost(const DisorderEnsemble& ens, double horizon, double dt, std::size_t draws)
{
    const double steps = dt > 0.0 ? std::ceil(horizon / dt) : 0.0;
    return static_cast<double>(ens.n_real) * static_cast<double>(draws) * (2.0 * steps + 2.0);
}

namespace detail {

inline double realization_dt(const DisorderEnsemble& ens, std::span<const double> V, double dt)
{
    return dt > 0.0 ? dt : 0.5 * max_stable_dt(ens.dim, ens.epsilon, V);
}

/// Pessimistic step used for the budget guard before any potential exists.
inline double budget_dt(const DisorderEnsemble& ens, double dt)
{
    if (dt > 0.0) return dt;
    const double vmax = ens.law == DisorderLaw::UniformUnit ? std::sqrt(3.0)
                                                            : std::sqrt(2.0 * std::log(static_cast<double>(ens.sites()))) + 1.0;
    return 0.05 / std::max(static_cast<double>(ens.dim), std::sqrt(ens.epsilon) * vmax);
}

} // namespace detail

/// Disorder- and phase-averaged |psi_hat(k, tau/eps)|^2 sum W0. Each
/// realization contributes the mean over its phase draws; the standard error
/// is taken across realizations.
inline AveragedDistribution averaged_momentum_distribution(const DisorderEnsemble& ens, const Distribution& W0, double tau,
                                                           const MicroscopicOptions& opt = {})
{
    ens.validate();
    require(W0.grid != nullptr && W0.grid->kind() == GridKind::TorusUniform && W0.grid->points_per_axis() == ens.L
                && W0.grid->dim() == ens.dim,
            "averaged_momentum_distribution: W0 must live on the L^d torus grid of the ensemble");
    if (!(tau >= 0.0)) throw DomainError("kinetic time must be nonnegative");
    if (opt.phase_draws == 0) throw DomainError("at least one phase draw is required");
    AveragedDistribution out;
    out.realizations = ens.n_real;
    out.phase_draws = opt.phase_draws;
    double total = 0.0;
    for (double w : W0.values) total += w;
    if (tau == 0.0) {
        // |psi_hat|^2 sum W0 = W0 for every draw
        out.mean = W0;
        out.std_error.assign(W0.size(), 0.0);
        return out;
    }
    if (ens.epsilon == 0.0) throw DomainError("kinetic time tau > 0 needs epsilon > 0");
    const double horizon = tau / ens.epsilon;
    out.horizon = horizon;
    out.cost = microscopic_cost(ens, horizon, detail::budget_dt(ens, opt.dt), opt.phase_draws);
    if (out.cost > opt.budget)
        throw BudgetExceeded("microscopic run needs ~" + std::to_string(out.cost) + " FFT passes of size "
                             + std::to_string(ens.sites()) + " (budget " + std::to_string(opt.budget) + ")");
    const LatticeFft fft(ens.dim, ens.L);
    const std::size_t N = ens.sites();
    std::vector<std::vector<double>> per(ens.n_real, std::vector<double>(N, 0.0));
    parallel_for(ens.n_real, [&](std::size_t r) {
        const auto V = sample_potential(ens, r);
        const double dt = detail::realization_dt(ens, V, opt.dt);
        for (std::size_t p = 0; p < opt.phase_draws; ++p) {
            const auto psi0 = random_phase_state(W0, ens.seed, r * opt.phase_draws + p, &fft);
            const auto psi = evolve(psi0, V, ens.epsilon, horizon, dt, &fft);
            const auto md = momentum_distribution(psi, fft);
            for (std::size_t i = 0; i < N; ++i) per[r][i] += md[i];
        }
        for (auto& x : per[r]) x *= total / static_cast<double>(opt.phase_draws);
    });
    out.mean = Distribution(W0.grid, std::vector<double>(N, 0.0), Statistics::Boltzmann);
    out.std_error.assign(N, 0.0);
    const double n = static_cast<double>(ens.n_real);
    for (std::size_t i = 0; i < N; ++i) {
        double mean = 0.0, m2 = 0.0;
        for (std::size_t r = 0; r < ens.n_real; ++r) {
            const double dlt = per[r][i] - mean;
            mean += dlt / static_cast<double>(r + 1);
            m2 += dlt * (per[r][i] - mean);
        }
        out.mean.values[i] = mean;
        out.std_error[i] = ens.n_real > 1 ? std::sqrt(m2 / (n - 1.0) / n) : 0.0;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Wigner transform.

struct WignerOptions {
    /// Half-width of the offset window in lattice sites; 0 means L/4.
    std::size_t cutoff = 0;
    /// Kinetic cells to fill; empty means all. Other cells stay zero.
    std::vector<std::size_t> cells;
};

/// Hann taper of the offset window, 1 at eta = 0.
inline double wigner_taper(std::span<const long> eta, std::size_t cutoff)
{
    double h = 1.0;
    for (long e : eta) h *= 0.5 * (1.0 + std::cos(pi * static_cast<double>(e) / static_cast<double>(cutoff + 1)));
    return h;
}

/// Discrete Wigner transform of the averaged kernel R(y, z) = mean_s
/// psi_s(y) conj(psi_s(z)) on kinetic cells of side round(1/eps) sites:
///   W(r, k) = eps^{-d} / |cell| sum_{eta} h(eta) e^{-i k.eta} sum_z R(z+eta, z),
/// where the inner sum runs over pairs whose midpoint z + eta/2 lies in the
/// cell (floored per axis) and h is a Hann taper over |eta_j| <= cutoff.
/// Integrating over k leaves the cell's mass per unit kinetic volume.
inline WignerField wigner_transform(std::span<const LatticeWavefunction> states, double epsilon, WignerOptions opt = {})
{
    require(!states.empty(), "wigner_transform needs at least one state");
    if (!(epsilon > 0.0)) throw DomainError("wigner_transform: epsilon must be positive");
    const int d = states.front().dim;
    const std::size_t L = states.front().L;
    for (const auto& s : states)
        require(s.dim == d && s.L == L && s.psi.size() == states.front().psi.size(), "wigner_transform: states differ in shape");
    if (static_cast<double>(L) < 2.0 / epsilon * (1.0 - 1e-12))
        throw DomainError("wigner_transform: lattice side " + std::to_string(L) + " is below 2/eps");
    const auto c = static_cast<std::size_t>(std::llround(1.0 / epsilon));
    if (c == 0 || L % c != 0)
        throw DomainError("wigner_transform: cell side " + std::to_string(c) + " does not divide L=" + std::to_string(L));
    const std::size_t cut = opt.cutoff == 0 ? L / 4 : opt.cutoff;
    if (2 * cut >= L)
        throw DomainError("wigner_transform: offset window " + std::to_string(cut) + " exceeds L/2 (aliasing)");
    const std::size_t m = L / c;
    const std::size_t W = 2 * cut + 1;
    std::size_t nwin = 1, ncell = 1, nsite = 1;
    for (int j = 0; j < d; ++j) {
        nwin *= W;
        ncell *= m;
        nsite *= c;
    }
    const auto Ll = static_cast<long>(L);
    auto wrap = [&](long x) { return static_cast<std::size_t>(((x % Ll) + Ll) % Ll); };
    auto site = [&](const std::array<long, 3>& x) {
        std::size_t i = 0;
        for (int j = 0; j < d; ++j) i = i * L + wrap(x[j]);
        return i;
    };
    std::vector<std::array<long, 3>> offs(nwin);
    std::vector<double> taper(nwin);
    for (std::size_t q = 0; q < nwin; ++q) {
        std::size_t rest = q;
        std::array<long, 3> e{0, 0, 0};
        for (int j = d - 1; j >= 0; --j) {
            e[j] = static_cast<long>(rest % W) - static_cast<long>(cut);
            rest /= W;
        }
        offs[q] = e;
        taper[q] = wigner_taper(std::span<const long>(e.data(), static_cast<std::size_t>(d)), cut);
    }
    auto floor_half = [](long e) { return e >= 0 ? e / 2 : -((-e + 1) / 2); };

    SpatialGrid sp = SpatialGrid::cube(d, m, epsilon * static_cast<double>(L));
    auto grid = make_grid(grid_for(DispersionModel::lattice(d), L));
    WignerField F(sp, grid, Statistics::Boltzmann);
    const LatticeFft fft(d, L);
    const auto node = fft.node_of_mode();
    const double scale = std::sqrt(static_cast<double>(fft.size()))
                         / (static_cast<double>(nsite) * static_cast<double>(states.size()) * std::pow(epsilon, d));
    std::vector<std::size_t> todo = opt.cells;
    if (todo.empty()) {
        todo.resize(ncell);
        std::iota(todo.begin(), todo.end(), std::size_t{0});
    }
    for (std::size_t cl : todo)
        if (cl >= ncell) throw ContractViolation("wigner_transform: cell index out of range");
    parallel_for(todo.size(), [&](std::size_t t) {
        const std::size_t cell = todo[t];
        std::array<long, 3> base{0, 0, 0};
        std::size_t rest = cell;
        for (int j = d - 1; j >= 0; --j) {
            base[j] = static_cast<long>((rest % m) * c);
            rest /= m;
        }
        std::vector<cplx> a(fft.size(), 0.0);
        for (std::size_t q = 0; q < nwin; ++q) {
            // midpoint z + eta/2 floors to z + floor(eta/2)
            std::array<long, 3> z0 = base;
            for (int j = 0; j < d; ++j) z0[j] -= floor_half(offs[q][j]);
            cplx g = 0.0;
            for (std::size_t s = 0; s < nsite; ++s) {
                std::array<long, 3> z = z0;
                std::size_t r2 = s;
                for (int j = d - 1; j >= 0; --j) {
                    z[j] += static_cast<long>(r2 % c);
                    r2 /= c;
                }
                std::array<long, 3> y = z;
                for (int j = 0; j < d; ++j) y[j] += offs[q][j];
                const std::size_t iy = site(y), iz = site(z);
                for (const auto& st : states) g += st.psi[iy] * std::conj(st.psi[iz]);
            }
            a[site(offs[q])] += taper[q] * g;
        }
        // forward FFT evaluates sum_eta a(eta) e^{-i k.eta}
        fft.forward(a);
        for (std::size_t mm = 0; mm < a.size(); ++mm) F.at(cell, node[mm]) = a[mm].real() * scale;
    });
    return F;
}

inline WignerField wigner_transform(const LatticeWavefunction& psi, double epsilon, WignerOptions opt = {})
{
    return wigner_transform(std::span<const LatticeWavefunction>(&psi, 1), epsilon, opt);
}

// ---------------------------------------------------------------------------
// Self-averaging and the kinetic-limit experiment.

/// Observable window: kinetic-space cube [0, side)^d (cells whose centres
/// fall inside) times a momentum set A.
struct ObservableWindow {
    double side = 2.0;
    std::function<bool(const Vec&)> momentum = [](const Vec&) { return true; };
};

struct SelfAveragingReport {
    double epsilon = 0.0;
    double tau = 0.0;
    double mean = 0.0;
    double variance = 0.0;
    std::size_t realizations = 0;
    std::size_t window_cells = 0;
};

/// Across-realization variance of n(Lambda, A) = int_Lambda dr int_A dk W(r, k)
/// for one random-phase state per realization evolved to tau / eps. The state
/// is scaled to unit mean density per kinetic volume, so n stays O(|Lambda|)
/// along an eps-ladder at fixed lattice side.
inline SelfAveragingReport self_averaging_variance(const DisorderEnsemble& ens, const Distribution& W0, double tau,
                                                   const ObservableWindow& win, const MicroscopicOptions& opt = {})
{
    ens.validate();
    if (ens.n_real < 10)
        throw ContractViolation("self-averaging needs at least 10 realizations, got " + std::to_string(ens.n_real));
    if (!(ens.epsilon > 0.0)) throw DomainError("self-averaging needs epsilon > 0");
    if (!(tau >= 0.0)) throw DomainError("kinetic time must be nonnegative");
    if (!(win.side > 0.0)) throw DomainError("observable window side must be positive");
    const double horizon = tau / ens.epsilon;
    const double cost = microscopic_cost(ens, horizon, detail::budget_dt(ens, opt.dt), 1);
    if (cost > opt.budget)
        throw BudgetExceeded("self-averaging run needs ~" + std::to_string(cost) + " FFT passes (budget "
                             + std::to_string(opt.budget) + ")");
    const auto c = static_cast<std::size_t>(std::llround(1.0 / ens.epsilon));
    if (c == 0 || ens.L % c != 0) throw DomainError("self-averaging: 1/eps must divide the lattice side");
    const std::size_t m = ens.L / c;
    const SpatialGrid sp = SpatialGrid::cube(ens.dim, m, ens.epsilon * static_cast<double>(ens.L));
    WignerOptions wopt;
    for (std::size_t cl = 0; cl < sp.size(); ++cl) {
        const auto a = sp.axis_indices(cl);
        bool in = true;
        for (int j = 0; j < ens.dim; ++j)
            in = in && (static_cast<double>(a[j]) + 0.5) * sp.cell_size < win.side;
        if (in) wopt.cells.push_back(cl);
    }
    if (wopt.cells.empty()) throw DomainError("observable window contains no kinetic cell");
    const double box_volume = std::pow(ens.epsilon * static_cast<double>(ens.L), ens.dim);
    const LatticeFft fft(ens.dim, ens.L);
    const auto grid = make_grid(grid_for(DispersionModel::lattice(ens.dim), ens.L));
    std::vector<double> mask(grid->size());
    for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = win.momentum(grid->node(i)) ? grid->weight(i) : 0.0;
    std::vector<double> n(ens.n_real);
    for (std::size_t r = 0; r < ens.n_real; ++r) {
        const auto V = sample_potential(ens, r);
        const auto psi0 = random_phase_state(W0, ens.seed, r, &fft);
        const auto psi = evolve(psi0, V, ens.epsilon, horizon, detail::realization_dt(ens, V, opt.dt), &fft);
        const auto F = wigner_transform(psi, ens.epsilon, wopt);
        std::vector<double> acc;
        acc.reserve(wopt.cells.size() * mask.size());
        for (std::size_t cl : wopt.cells)
            for (std::size_t i = 0; i < mask.size(); ++i)
                if (mask[i] > 0.0) acc.push_back(mask[i] * F.at(cl, i));
        n[r] = pairwise_sum(acc) * sp.cell_volume() * box_volume;
    }
    SelfAveragingReport rep;
    rep.epsilon = ens.epsilon;
    rep.tau = tau;
    rep.realizations = ens.n_real;
    rep.window_cells = wopt.cells.size();
    double mean = 0.0, m2 = 0.0;
    for (std::size_t r = 0; r < n.size(); ++r) {
        const double dlt = n[r] - mean;
        mean += dlt / static_cast<double>(r + 1);
        m2 += dlt * (n[r] - mean);
    }
    rep.mean = mean;
    rep.variance = std::max(0.0, m2 / static_cast<double>(n.size() - 1));
    return rep;
}

struct KineticComparisonOptions {
    MicroscopicOptions micro;
    /// Smearing of the kinetic reference; NaN picks auto_eta at the mean
    /// energy of W0.
    double eta = std::numeric_limits<double>::quiet_NaN();
    double tolerance = 1e-9;
    double inconclusive_ratio = 0.3;
    /// When set, the self-averaging variance at the last tau is recorded per eps.
    std::optional<ObservableWindow> window;
    /// Keep the averaged and kinetic distributions of every checkpoint.
    bool keep_distributions = false;
};

struct KineticComparisonReport {
    std::vector<double> epsilons;
    std::vector<double> taus;
    /// [eps][tau]: int dk |mean_micro - W_kin|
    std::vector<std::vector<double>> distance;
    /// [eps][tau]: standard error of the distance (linearized in the per-node means)
    std::vector<std::vector<double>> stat_error;
    /// [eps][tau]: expected L1 inflation from sampling noise, sqrt(2/pi) int dk se(k)
    std::vector<std::vector<double>> noise_floor;
    std::vector<std::vector<bool>> inconclusive;
    /// per tau: distance strictly decreasing along the ladder
    std::vector<bool> decreasing;
    std::vector<double> variances;
    /// filled when keep_distributions is set: [eps][tau] and [tau]
    std::vector<std::vector<Distribution>> micro;
    std::vector<Distribution> kinetic;
    double eta = 0.0;
    double mass = 0.0;
    std::size_t realizations = 0;
    std::size_t phase_draws = 0;

    bool any_inconclusive() const
    {
        for (const auto& row : inconclusive)
            for (bool b : row)
                if (b) return true;
        return false;
    }
    bool all_decreasing() const { return std::all_of(decreasing.begin(), decreasing.end(), [](bool b) { return b; }); }
};

/// Averaged microscopic momentum distributions along an eps-ladder against
/// the linear kinetic equation with unit spectrum on the same Fourier grid.
inline KineticComparisonReport kinetic_comparison(const DisorderEnsemble& base, std::vector<double> ladder,
                                                  const Distribution& W0, std::vector<double> taus,
                                                  const KineticComparisonOptions& opt = {})
{
    base.validate();
    if (ladder.empty() || taus.empty()) throw ContractViolation("kinetic comparison needs an eps-ladder and tau checkpoints");
    for (std::size_t i = 0; i < ladder.size(); ++i) {
        if (!(ladder[i] > 0.0)) throw DomainError("eps-ladder entries must be positive");
        if (i > 0 && !(ladder[i] < ladder[i - 1])) throw ContractViolation("eps-ladder must be strictly decreasing");
    }
    for (std::size_t i = 0; i < taus.size(); ++i) {
        if (!(taus[i] >= 0.0)) throw DomainError("tau checkpoints must be nonnegative");
        if (i > 0 && !(taus[i] > taus[i - 1])) throw ContractViolation("tau checkpoints must be increasing");
    }
    require(W0.grid != nullptr && W0.grid->kind() == GridKind::TorusUniform && W0.grid->points_per_axis() == base.L
                && W0.grid->dim() == base.dim,
            "kinetic comparison: W0 must live on the L^d torus grid of the ensemble");
    const auto model = DispersionModel::lattice(base.dim);
    const auto& grid = *W0.grid;
    const auto omega = node_energies(grid, model);
    double mass = 0.0, energy = 0.0;
    for (std::size_t i = 0; i < grid.size(); ++i) {
        mass += grid.weight(i) * W0.values[i];
        energy += grid.weight(i) * W0.values[i] * omega[i];
    }
    if (!(mass > 0.0)) throw InvariantViolation("kinetic comparison: W0 has no mass");
    KineticComparisonReport rep;
    rep.epsilons = ladder;
    rep.taus = taus;
    rep.mass = mass;
    rep.realizations = base.n_real;
    rep.phase_draws = opt.micro.phase_draws;
    rep.eta = std::isnan(opt.eta) ? auto_eta(grid, model, energy / mass) : opt.eta;
    const auto M = std::make_shared<const CollisionMatrix>(W0.grid, model, Spectrum::constant(1.0), rep.eta);
    const auto C = CollisionHandle::linear(M);
    std::vector<std::vector<double>> kin;
    for (double tau : taus) {
        if (tau == 0.0) {
            kin.push_back(W0.values);
            continue;
        }
        SolverConfig cfg;
        cfg.t_max = tau;
        cfg.tolerance = opt.tolerance;
        cfg.dt = std::min(cfg.dt, tau);
        kin.push_back(solve_homogeneous(W0, C, cfg).final_state().values);
    }
    if (opt.keep_distributions)
        for (auto& v : kin) rep.kinetic.emplace_back(W0.grid, v, Statistics::Boltzmann);
    const std::size_t ne = ladder.size(), nt = taus.size();
    rep.distance.assign(ne, std::vector<double>(nt, 0.0));
    rep.stat_error = rep.distance;
    rep.noise_floor = rep.distance;
    rep.inconclusive.assign(ne, std::vector<bool>(nt, false));
    for (std::size_t e = 0; e < ne; ++e) {
        DisorderEnsemble ens = base;
        ens.epsilon = ladder[e];
        for (std::size_t t = 0; t < nt; ++t) {
            const auto A = averaged_momentum_distribution(ens, W0, taus[t], opt.micro);
            std::vector<double> dist(grid.size()), var(grid.size()), fl(grid.size());
            for (std::size_t i = 0; i < grid.size(); ++i) {
                const double w = grid.weight(i);
                dist[i] = w * std::abs(A.mean.values[i] - kin[t][i]);
                var[i] = w * w * A.std_error[i] * A.std_error[i];
                fl[i] = w * A.std_error[i];
            }
            rep.distance[e][t] = pairwise_sum(dist);
            rep.stat_error[e][t] = std::sqrt(pairwise_sum(var));
            rep.noise_floor[e][t] = std::sqrt(2.0 / pi) * pairwise_sum(fl);
            rep.inconclusive[e][t] = rep.stat_error[e][t] > opt.inconclusive_ratio * rep.distance[e][t];
            if (opt.keep_distributions) {
                if (t == 0) rep.micro.emplace_back();
                rep.micro.back().push_back(A.mean);
            }
        }
        if (opt.window) rep.variances.push_back(self_averaging_variance(ens, W0, taus.back(), *opt.window, opt.micro).variance);
    }
    rep.decreasing.assign(nt, true);
    for (std::size_t t = 0; t < nt; ++t)
        for (std::size_t e = 1; e < ne; ++e)
            if (!(rep.distance[e][t] < rep.distance[e - 1][t])) rep.decreasing[t] = false;
    return rep;
}

} // namespace qkin

#endif // QKIN_MICROSCOPIC_HPP
