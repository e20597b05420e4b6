#ifndef QKIN_TRANSPORT_HPP
#define QKIN_TRANSPORT_HPP

#include <complex>
#include <memory>
#include <mutex>

#include <Eigen/Dense>
#include <fftw3.h>

#include "collision_linear.hpp"
#include "collision_uu.hpp"
#include "ode.hpp"

namespace qkin {

enum class CollisionKind { None, Linear, Uu, Generator };

inline std::string to_string(CollisionKind k)
{
    switch (k) {
    case CollisionKind::None: return "none";
    case CollisionKind::Linear: return "linear";
    case CollisionKind::Uu: return "uu";
    case CollisionKind::Generator: return "generator";
    }
    return "?";
}

/// Type-erased collision operator C acting on one momentum distribution.
///
/// The generator kind wraps a dense matrix A with dW/dt = A W that satisfies
/// detailed balance with respect to a positive measure (pi_i A_ij = pi_j A_ji).
/// It carries an exact exponential flow, which the inhomogeneous solver uses
/// for all cells at once instead of integrating each cell separately.
class CollisionHandle {
public:
    using Apply = std::function<void(std::span<const double> W, std::span<double> out)>;
    using Flow = std::function<void(std::span<double> values, std::size_t cells, double dt)>;

    static CollisionHandle none(GridPtr grid, DispersionModel model, Statistics stats)
    {
        require(grid != nullptr, "collision handle needs a grid");
        CollisionHandle h(CollisionKind::None, std::move(grid), model, stats);
        h.apply_ = [](std::span<const double>, std::span<double> out) { std::fill(out.begin(), out.end(), 0.0); };
        h.flow_ = [](std::span<double>, std::size_t, double) {};
        return h;
    }

    /// Statistics of a linear handle only control admissibility checks; the
    /// operator itself preserves 0 <= W <= 1.
    static CollisionHandle linear(std::shared_ptr<const CollisionMatrix> M, Statistics stats = Statistics::Boltzmann)
    {
        require(M != nullptr, "collision handle needs a matrix");
        CollisionHandle h(CollisionKind::Linear, M->grid(), M->model(), stats);
        h.apply_ = [M](std::span<const double> W, std::span<double> out) { M->apply(W, out); };
        return h;
    }

    static CollisionHandle uu(std::shared_ptr<const UuOperator> op)
    {
        require(op != nullptr, "collision handle needs an operator");
        CollisionHandle h(CollisionKind::Uu, op->grid_ptr(), op->model(), op->statistics());
        h.apply_ = [op](std::span<const double> W, std::span<double> out) {
            const auto C = op->apply(W);
            std::copy(C.begin(), C.end(), out.begin());
        };
        return h;
    }

    /// `balance` is the measure pi with pi_i A_ij = pi_j A_ji; the grid
    /// weights when empty.
    static CollisionHandle generator(GridPtr grid, DispersionModel model, Eigen::MatrixXd A,
                                     Statistics stats = Statistics::Boltzmann, Eigen::VectorXd balance = {})
    {
        require(grid != nullptr, "collision handle needs a grid");
        const auto n = static_cast<Eigen::Index>(grid->size());
        if (A.rows() != n || A.cols() != n) throw ContractViolation("generator size does not match the grid");
        if (balance.size() == 0) {
            balance.resize(n);
            for (Eigen::Index i = 0; i < n; ++i) balance(i) = grid->weight(static_cast<std::size_t>(i));
        }
        require(balance.size() == n && balance.minCoeff() > 0.0, "generator balance measure must be positive");
        const Eigen::VectorXd sw = balance.cwiseSqrt();
        Eigen::MatrixXd S = sw.asDiagonal() * A * sw.cwiseInverse().asDiagonal();
        const double scale = std::max(S.cwiseAbs().maxCoeff(), 1e-300);
        if ((S - S.transpose()).cwiseAbs().maxCoeff() > 1e-12 * scale)
            throw ContractViolation("generator violates detailed balance with respect to its measure");
        S = 0.5 * (S + S.transpose());
        auto st = std::make_shared<GeneratorState>();
        st->A = std::move(A);
        st->sqrt_w = sw;
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(S);
        st->U = es.eigenvectors();
        st->lambda = es.eigenvalues();
        CollisionHandle h(CollisionKind::Generator, std::move(grid), model, stats);
        h.apply_ = [st](std::span<const double> W, std::span<double> out) {
            Eigen::Map<const Eigen::VectorXd> w(W.data(), static_cast<Eigen::Index>(W.size()));
            Eigen::Map<Eigen::VectorXd> o(out.data(), static_cast<Eigen::Index>(out.size()));
            o.noalias() = st->A * w;
        };
        h.flow_ = [st](std::span<double> values, std::size_t cells, double dt) { st->flow(values, cells, dt); };
        return h;
    }

    CollisionKind kind() const { return kind_; }
    const GridPtr& grid() const { return grid_; }
    const DispersionModel& model() const { return model_; }
    Statistics statistics() const { return stats_; }
    bool has_flow() const { return static_cast<bool>(flow_); }

    void apply(std::span<const double> W, std::span<double> out) const
    {
        if (W.size() != grid_->size() || out.size() != grid_->size())
            throw ContractViolation("collision apply: size mismatch with grid");
        apply_(W, out);
    }
    std::vector<double> apply(std::span<const double> W) const
    {
        std::vector<double> out(W.size());
        apply(W, out);
        return out;
    }
    void flow(std::span<double> values, std::size_t cells, double dt) const
    {
        require(has_flow(), "collision handle has no exact flow");
        require(values.size() == cells * grid_->size(), "collision flow: size mismatch");
        flow_(values, cells, dt);
    }

private:
    struct GeneratorState {
        Eigen::MatrixXd A;
        Eigen::VectorXd sqrt_w;
        Eigen::MatrixXd U;
        Eigen::VectorXd lambda;
        std::mutex mu;
        double cached_dt = NAN;
        Eigen::MatrixXd expT;  // transpose of exp(A dt)

        void flow(std::span<double> values, std::size_t cells, double dt)
        {
            using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
            const Eigen::Index n = A.rows();
            std::lock_guard<std::mutex> lock(mu);
            if (!(cached_dt == dt)) {
                const Eigen::VectorXd e = (lambda * dt).array().exp();
                const Eigen::MatrixXd Es = U * e.asDiagonal() * U.transpose();
                expT = (sqrt_w.cwiseInverse().asDiagonal() * Es * sqrt_w.asDiagonal()).transpose();
                cached_dt = dt;
            }
            Eigen::Map<RowMat> X(values.data(), static_cast<Eigen::Index>(cells), n);
            const RowMat Y = X * expT;
            X = Y;
        }
    };

    CollisionHandle(CollisionKind k, GridPtr g, DispersionModel m, Statistics s)
        : kind_(k), grid_(std::move(g)), model_(m), stats_(s)
    {
    }

    CollisionKind kind_;
    GridPtr grid_;
    DispersionModel model_;
    Statistics stats_;
    Apply apply_;
    Flow flow_;
};

// ---------------------------------------------------------------------------
// Homogeneous evolution.

namespace detail {

/// Right-hand side for the integrator. An intermediate Runge-Kutta stage
/// outside the admissible set makes the nonlinear operator throw; the stage
/// then yields NaN so the step is rejected and retried with a smaller one.
inline Rhs guarded_rhs(const CollisionHandle& C)
{
    return [&C](std::span<const double> w, std::span<double> dw) {
        try {
            C.apply(w, dw);
        } catch (const InvariantViolation&) {
            std::fill(dw.begin(), dw.end(), NAN);
        }
    };
}

} // namespace detail

inline double entropy_of(const MomentumGrid& grid, std::span<const double> W, Statistics stats)
{
    std::vector<double> s(W.size());
    for (std::size_t i = 0; i < W.size(); ++i) s[i] = entropy_density(W[i], stats);
    return integrate(grid, s);
}

struct StepRecord {
    double t = 0.0;
    double dt = 0.0;
    double mass = 0.0;
    Vec momentum{0.0, 0.0, 0.0};
    double energy = 0.0;
    double entropy = 0.0;
};

struct Trajectory {
    GridPtr grid;
    Statistics stats = Statistics::Boltzmann;
    std::vector<double> times;
    std::vector<std::vector<double>> snapshots;
    /// Initial state and every accepted step.
    std::vector<StepRecord> steps;
    double mass_drift = 0.0;      ///< max |m(t) - m(0)| / |m(0)|
    double momentum_drift = 0.0;  ///< max_a |p_a(t) - p_a(0)| / |m(0)|
    double energy_drift = 0.0;    ///< max |E(t) - E(0)| / |E(0)|
    /// Smallest entropy change over a single accepted step (0 without steps).
    double min_entropy_increment = 0.0;
    OdeStats ode;

    Distribution final_state() const { return Distribution(grid, snapshots.back(), stats); }
};

/// Integrates dW/dt = C(W) with adaptive RK4 from t = 0 to cfg.t_max.
/// Steps that leave the admissible set are rejected and retried with a
/// smaller step; NumericalFault (carrying the last accepted state) is thrown
/// when the step falls below dt_min.
inline Trajectory solve_homogeneous(const Distribution& W0, const CollisionHandle& C, SolverConfig cfg)
{
    cfg.validate();
    require(W0.grid != nullptr, "solve_homogeneous: distribution without grid");
    if (!W0.grid->same_as(*C.grid())) throw ContractViolation("solve_homogeneous: distribution lives on a different grid");
    if (C.kind() == CollisionKind::Uu && W0.stats != C.statistics())
        throw ContractViolation("solve_homogeneous: distribution statistics differ from the collision operator");
    check_admissible(W0.values, W0.stats, "initial distribution");
    const auto& grid = *W0.grid;
    const auto& model = C.model();
    Trajectory tr;
    tr.grid = W0.grid;
    tr.stats = W0.stats;
    const auto stops = snapshot_times(0.0, cfg.t_max, cfg.snapshot_every);
    std::size_t next = 0;
    double smin = INFINITY;
    auto record = [&](double t, double dt, std::span<const double> y) {
        const auto m = moments(grid, model, y);
        StepRecord r{t, dt, m.mass, m.momentum, m.energy, entropy_of(grid, y, tr.stats)};
        if (!tr.steps.empty()) {
            const auto& r0 = tr.steps.front();
            const double ms = std::max(std::abs(r0.mass), 1e-300);
            tr.mass_drift = std::max(tr.mass_drift, std::abs(r.mass - r0.mass) / ms);
            for (int a = 0; a < 3; ++a)
                tr.momentum_drift = std::max(tr.momentum_drift, std::abs(r.momentum[a] - r0.momentum[a]) / ms);
            tr.energy_drift =
                std::max(tr.energy_drift, std::abs(r.energy - r0.energy) / std::max(std::abs(r0.energy), 1e-300));
            smin = std::min(smin, r.entropy - tr.steps.back().entropy);
        }
        tr.steps.push_back(r);
    };
    std::vector<double> y = W0.values;
    tr.times.push_back(0.0);
    tr.snapshots.push_back(y);
    if (cfg.t_max > 0.0) {
        AdaptiveRk4 rk(cfg);
        tr.ode = rk.run(
            y, 0.0, cfg.t_max, detail::guarded_rhs(C),
            [&](std::span<const double> nw, std::span<const double>) { return is_admissible(nw, tr.stats); },
            [&](double t, std::span<const double> w, const StepInfo& info) {
                record(t, info.dt, w);
                if (t == 0.0) return;
                while (next < stops.size() && std::abs(t - stops[next]) <= 1e-12 * std::max(1.0, t)) {
                    tr.times.push_back(t);
                    tr.snapshots.emplace_back(w.begin(), w.end());
                    ++next;
                }
            },
            stops);
    } else {
        record(0.0, 0.0, y);
    }
    tr.min_entropy_increment = std::isfinite(smin) ? smin : 0.0;
    return tr;
}

struct ShortTimeReport {
    std::vector<double> t;
    std::vector<double> e;
    double order = NAN;
    double prefactor = NAN;
    /// All residuals vanish (no order can be fitted).
    bool vanishing = false;
};

/// e(t) = || (W(t) - W0)/t - C(W0) ||_1 for each t, with W(t) from tightly
/// controlled RK4, and the least-squares slope of log e against log t.
inline ShortTimeReport short_time_check(const Distribution& W0, const CollisionHandle& C, std::vector<double> t_list,
                                        double tolerance = 1e-13)
{
    if (t_list.size() < 2) throw ContractViolation("short_time_check needs at least two times");
    for (double t : t_list)
        if (!(t > 0.0)) throw ContractViolation("short_time_check times must be positive");
    std::sort(t_list.begin(), t_list.end());
    if (t_list.back() < 10.0 * t_list.front() * (1.0 - 1e-12))
        throw ContractViolation("short_time_check times must span at least one decade");
    if (!W0.grid->same_as(*C.grid())) throw ContractViolation("short_time_check: distribution lives on a different grid");
    check_admissible(W0.values, W0.stats, "initial distribution");
    const auto& grid = *W0.grid;
    const auto c0 = C.apply(W0.values);
    ShortTimeReport rep;
    std::vector<double> lx, ly;
    for (double t : t_list) {
        SolverConfig cfg;
        cfg.dt = t / 16.0;
        cfg.dt_max = t / 16.0;
        cfg.dt_min = t * 1e-9;
        cfg.tolerance = tolerance;
        cfg.t_max = t;
        std::vector<double> y = W0.values;
        AdaptiveRk4(cfg).run(y, 0.0, t, detail::guarded_rhs(C));
        std::vector<double> r(y.size());
        for (std::size_t i = 0; i < y.size(); ++i) r[i] = std::abs((y[i] - W0.values[i]) / t - c0[i]);
        const double e = integrate(grid, r);
        rep.t.push_back(t);
        rep.e.push_back(e);
        if (e > 0.0) {
            lx.push_back(std::log(t));
            ly.push_back(std::log(e));
        }
    }
    if (lx.size() < 2) {
        rep.vanishing = true;
        return rep;
    }
    const auto fit = fit_line(lx, ly);
    rep.order = fit.slope;
    rep.prefactor = std::exp(fit.intercept);
    return rep;
}

// ---------------------------------------------------------------------------
// Free flight.

enum class FlightScheme { SemiLagrangian, Spectral };

namespace detail {

inline std::vector<Vec> node_velocities(const MomentumGrid& grid, const DispersionModel& model)
{
    std::vector<Vec> v(grid.size());
    for (std::size_t i = 0; i < grid.size(); ++i) {
        const Vec& k = grid.node(i);
        // the acoustic velocity has no limit at k = 0; a single node is held still
        if (model.kind() == DispersionKind::PhononAcoustic && model.omega(k) == 0.0) v[i] = {0.0, 0.0, 0.0};
        else v[i] = model.group_velocity(k);
    }
    return v;
}

inline void flight_semi_lagrangian(WignerField& F, const std::vector<Vec>& vel, double dt)
{
    const auto& sp = F.space;
    const std::size_t N = F.nodes();
    const std::size_t cells = F.cells();
    // per node and axis: source offset o (mod m) and weight f of the second cell
    std::vector<std::array<std::size_t, 3>> off(N);
    std::vector<std::array<double, 3>> frac(N);
    for (std::size_t n = 0; n < N; ++n) {
        for (int a = 0; a < 3; ++a) {
            const std::size_t m = sp.cells[a];
            if (m == 1 || a >= sp.dim) {
                off[n][a] = 0;
                frac[n][a] = 0.0;
                continue;
            }
            const double s = vel[n][a] * dt / sp.cell_size;
            const double i0 = std::floor(s);
            const double f = s - i0;
            const auto mi = static_cast<long long>(m);
            long long o = -static_cast<long long>(i0) % mi;
            if (o < 0) o += mi;
            off[n][a] = static_cast<std::size_t>(o);
            frac[n][a] = f;
        }
    }
    const std::vector<double> src = F.values;
    parallel_for(cells, [&](std::size_t c) {
        const auto ax = sp.axis_indices(c);
        double* out = F.values.data() + c * N;
        for (std::size_t n = 0; n < N; ++n) {
            std::array<std::size_t, 3> i0{}, i1{};
            for (int a = 0; a < 3; ++a) {
                const std::size_t m = sp.cells[a];
                i0[a] = (ax[a] + off[n][a]) % m;
                i1[a] = (ax[a] + off[n][a] + m - 1) % m;
            }
            double s = 0.0;
            for (int corner = 0; corner < 8; ++corner) {
                double w = 1.0;
                std::array<std::size_t, 3> idx{};
                for (int a = 0; a < 3; ++a) {
                    const bool second = (corner >> a) & 1;
                    w *= second ? frac[n][a] : 1.0 - frac[n][a];
                    idx[a] = second ? i1[a] : i0[a];
                }
                if (w == 0.0) continue;
                s += w * src[sp.flat_index(idx) * N + n];
            }
            out[n] = s;
        }
    });
}

inline std::mutex& fftw_planner_mutex()
{
    static std::mutex m;
    return m;
}

inline void flight_spectral(WignerField& F, const std::vector<Vec>& vel, double dt)
{
    const auto& sp = F.space;
    const std::size_t N = F.nodes();
    const std::size_t cells = F.cells();
    const int n0 = static_cast<int>(sp.cells[0]), n1 = static_cast<int>(sp.cells[1]), n2 = static_cast<int>(sp.cells[2]);
    const std::size_t nh = static_cast<std::size_t>(n2 / 2 + 1);
    const std::size_t nc = static_cast<std::size_t>(n0) * static_cast<std::size_t>(n1) * nh;
    fftw_plan fwd, bwd;
    {
        std::lock_guard<std::mutex> lock(fftw_planner_mutex());
        std::vector<double> r(cells);
        std::vector<std::complex<double>> z(nc);
        auto* zp = reinterpret_cast<fftw_complex*>(z.data());
        fwd = fftw_plan_dft_r2c_3d(n0, n1, n2, r.data(), zp, FFTW_ESTIMATE | FFTW_UNALIGNED);
        bwd = fftw_plan_dft_c2r_3d(n0, n1, n2, zp, r.data(), FFTW_ESTIMATE | FFTW_UNALIGNED);
    }
    // signed wavenumbers per axis; a Nyquist mode of the real interpolant
    // is a cosine and shifts by the factor cos(q s)
    auto wavenumbers = [&](int a, std::size_t count, std::vector<char>& nyquist) {
        const std::size_t m = sp.cells[a];
        std::vector<double> q(count, 0.0);
        nyquist.assign(count, 0);
        for (std::size_t j = 0; j < count; ++j) {
            nyquist[j] = m > 1 && 2 * j == m;
            const double kappa = 2 * j <= m ? static_cast<double>(j) : static_cast<double>(j) - static_cast<double>(m);
            q[j] = two_pi * kappa / sp.side(a);
        }
        return q;
    };
    std::vector<char> ny0, ny1, ny2;
    const auto q0 = wavenumbers(0, sp.cells[0], ny0), q1 = wavenumbers(1, sp.cells[1], ny1), q2 = wavenumbers(2, nh, ny2);
    const double inv = 1.0 / static_cast<double>(cells);
    parallel_for(N, [&](std::size_t n) {
        Vec s{0.0, 0.0, 0.0};
        bool moves = false;
        for (int a = 0; a < sp.dim; ++a) {
            s[a] = sp.cells[a] > 1 ? vel[n][a] * dt : 0.0;
            moves = moves || s[a] != 0.0;
        }
        if (!moves) return;
        std::vector<double> r(cells);
        std::vector<std::complex<double>> z(nc);
        for (std::size_t c = 0; c < cells; ++c) r[c] = F.values[c * N + n];
        fftw_execute_dft_r2c(fwd, r.data(), reinterpret_cast<fftw_complex*>(z.data()));
        for (std::size_t i = 0; i < sp.cells[0]; ++i)
            for (std::size_t j = 0; j < sp.cells[1]; ++j)
                for (std::size_t l = 0; l < nh; ++l) {
                    auto factor = [](double q, double x, bool ny) {
                        return ny ? std::complex<double>(std::cos(q * x), 0.0) : std::polar(1.0, -q * x);
                    };
                    z[(i * sp.cells[1] + j) * nh + l] *=
                        inv * factor(q0[i], s[0], ny0[i]) * factor(q1[j], s[1], ny1[j]) * factor(q2[l], s[2], ny2[l]);
                }
        fftw_execute_dft_c2r(bwd, reinterpret_cast<fftw_complex*>(z.data()), r.data());
        for (std::size_t c = 0; c < cells; ++c) F.values[c * N + n] = r[c];
    });
    std::lock_guard<std::mutex> lock(fftw_planner_mutex());
    fftw_destroy_plan(fwd);
    fftw_destroy_plan(bwd);
}

inline std::vector<double> mass_per_node(const WignerField& F)
{
    const std::size_t N = F.nodes();
    std::vector<double> m(N, 0.0);
    parallel_for(N, [&](std::size_t n) {
        std::vector<double> col(F.cells());
        for (std::size_t c = 0; c < F.cells(); ++c) col[c] = F.values[c * N + n];
        m[n] = pairwise_sum(col);
    });
    return m;
}

} // namespace detail

/// In-place free flight W(r, k) <- W(r - v(k) dt, k) on the periodic box,
/// followed by a per-node rescale that restores the mass of each k exactly.
inline void free_flight_inplace(WignerField& F, const DispersionModel& model, double dt,
                                FlightScheme scheme = FlightScheme::SemiLagrangian)
{
    if (!(dt >= 0.0)) throw DomainError("free_flight: dt must be nonnegative");
    require(F.grid != nullptr && F.values.size() == F.cells() * F.nodes(), "free_flight: malformed field");
    if (dt == 0.0) return;
    const auto vel = detail::node_velocities(*F.grid, model);
    const auto before = detail::mass_per_node(F);
    if (scheme == FlightScheme::SemiLagrangian) detail::flight_semi_lagrangian(F, vel, dt);
    else detail::flight_spectral(F, vel, dt);
    const auto after = detail::mass_per_node(F);
    const std::size_t N = F.nodes();
    parallel_for(F.cells(), [&](std::size_t c) {
        for (std::size_t n = 0; n < N; ++n)
            if (after[n] != 0.0 && after[n] != before[n]) F.values[c * N + n] *= before[n] / after[n];
    });
}

inline WignerField free_flight(const WignerField& F, const DispersionModel& model, double dt,
                               FlightScheme scheme = FlightScheme::SemiLagrangian)
{
    WignerField out = F;
    free_flight_inplace(out, model, dt, scheme);
    return out;
}

// ---------------------------------------------------------------------------
// Inhomogeneous evolution by operator splitting.

struct SpatialRecord {
    double t = 0.0;
    double mass = 0.0;
    Vec mean{0.0, 0.0, 0.0};      ///< density centroid, relative to the reference point
    Vec variance{0.0, 0.0, 0.0};  ///< per-axis density variance
};

struct InhomogeneousOptions {
    FlightScheme flight = FlightScheme::SemiLagrangian;
    /// Point that displacements are measured from (minimum image); defaults
    /// to the box centre.
    std::optional<Vec> reference;
};

struct InhomogeneousTrajectory {
    std::vector<double> times;
    std::vector<WignerField> snapshots;
    /// Initial state and every step.
    std::vector<SpatialRecord> records;
    double mass_drift = 0.0;  ///< max relative change of the total mass
    std::size_t steps = 0;

    const WignerField& final_field() const { return snapshots.back(); }
};

inline SpatialRecord spatial_record(const WignerField& F, double t, const Vec& ref)
{
    const auto rho = F.density();
    SpatialRecord r;
    r.t = t;
    const auto& sp = F.space;
    std::vector<double> m0(rho.size()), m1[3], m2[3];
    for (int a = 0; a < 3; ++a) {
        m1[a].assign(rho.size(), 0.0);
        m2[a].assign(rho.size(), 0.0);
    }
    for (std::size_t c = 0; c < rho.size(); ++c) {
        const Vec x = sp.center(c);
        m0[c] = rho[c];
        for (int a = 0; a < sp.dim; ++a) {
            if (sp.cells[a] == 1) continue;
            const double L = sp.side(a);
            const double d = x[a] - ref[a] - L * std::round((x[a] - ref[a]) / L);
            m1[a][c] = rho[c] * d;
            m2[a][c] = rho[c] * d * d;
        }
    }
    const double tot = pairwise_sum(m0);
    r.mass = tot * sp.cell_volume();
    for (int a = 0; a < 3; ++a) {
        if (tot == 0.0) break;
        r.mean[a] = pairwise_sum(m1[a]) / tot;
        r.variance[a] = pairwise_sum(m2[a]) / tot - r.mean[a] * r.mean[a];
    }
    return r;
}

/// Splitting solver for dF/dt + v . grad_r F = C(F), C acting on each cell.
/// The macro step is cfg.dt (shortened to land on snapshot times). Strang:
/// half flight, collision, half flight; Lie: flight, collision. The
/// collision substep uses the handle's exact flow when it has one and
/// adaptive RK4 per cell otherwise.
inline InhomogeneousTrajectory solve_inhomogeneous(const WignerField& F0, const CollisionHandle& C,
                                                   const DispersionModel& model, SolverConfig cfg,
                                                   InhomogeneousOptions opt = {})
{
    cfg.validate();
    require(F0.grid != nullptr, "solve_inhomogeneous: field without grid");
    if (!F0.grid->same_as(*C.grid())) throw ContractViolation("solve_inhomogeneous: field lives on a different grid");
    if (C.kind() == CollisionKind::Uu && F0.stats != C.statistics())
        throw ContractViolation("solve_inhomogeneous: field statistics differ from the collision operator");
    check_admissible(F0.values, F0.stats, "initial field");
    Vec ref{0.0, 0.0, 0.0};
    for (int a = 0; a < F0.space.dim; ++a) ref[a] = 0.5 * F0.space.side(a);
    if (opt.reference) ref = *opt.reference;

    InhomogeneousTrajectory tr;
    WignerField F = F0;
    tr.times.push_back(0.0);
    tr.snapshots.push_back(F);
    tr.records.push_back(spatial_record(F, 0.0, ref));
    const double mass0 = tr.records.front().mass;
    const std::size_t N = F.nodes();

    auto collide = [&](double h, double t) {
        if (C.kind() == CollisionKind::None) return;
        if (C.has_flow()) {
            C.flow(F.values, F.cells(), h);
            return;
        }
        SolverConfig cc = cfg;
        cc.t_max = h;
        cc.dt = std::min(cfg.dt, h);
        cc.dt_min = std::min(cfg.dt_min, cc.dt);
        auto one = [&](std::size_t c) {
            std::vector<double> y(F.cell(c).begin(), F.cell(c).end());
            try {
                AdaptiveRk4(cc).run(
                    y, 0.0, h, detail::guarded_rhs(C),
                    [&](std::span<const double> nw, std::span<const double>) { return is_admissible(nw, F.stats); });
            } catch (const NumericalFault& e) {
                throw NumericalFault(std::string(e.what()) + " (cell " + std::to_string(c) + ", macro time "
                                         + std::to_string(t) + ")",
                                     e.snapshot, t + e.time);
            }
            std::copy(y.begin(), y.end(), F.cell(c).begin());
        };
        // the nonlinear operator parallelizes internally
        if (C.kind() == CollisionKind::Uu) {
            for (std::size_t c = 0; c < F.cells(); ++c) one(c);
        } else {
            parallel_for(F.cells(), one);
        }
    };

    const auto stops = snapshot_times(0.0, cfg.t_max, cfg.snapshot_every);
    double t = 0.0;
    std::size_t next = 0;
    const double eps = 1e-12 * std::max(1.0, cfg.t_max);
    while (cfg.t_max > 0.0 && t < cfg.t_max - eps) {
        const double target = stops[next];
        double h = cfg.dt;
        if (t + h > target - eps) h = target - t;
        if (cfg.splitting == SplittingOrder::Strang) {
            free_flight_inplace(F, model, 0.5 * h, opt.flight);
            collide(h, t);
            free_flight_inplace(F, model, 0.5 * h, opt.flight);
        } else {
            free_flight_inplace(F, model, h, opt.flight);
            collide(h, t);
        }
        t = (t + h >= target - eps) ? target : t + h;
        ++tr.steps;
        // spectral flight can ring at the 1e-16 level around sharp features
        const double floor_tol = opt.flight == FlightScheme::Spectral
                                     ? -1e-10 * std::max(1.0, *std::max_element(F.values.begin(), F.values.end()))
                                     : 0.0;
        for (std::size_t i = 0; i < F.values.size(); ++i) {
            const double w = F.values[i];
            if (!std::isfinite(w) || w < floor_tol || (F.stats == Statistics::Fermion && w > 1.0 + 1e-12))
                throw NumericalFault("solve_inhomogeneous: inadmissible value " + std::to_string(w) + " at cell "
                                         + std::to_string(i / N) + ", node " + std::to_string(i % N)
                                         + ", t=" + std::to_string(t),
                                     F.values, t);
        }
        tr.records.push_back(spatial_record(F, t, ref));
        tr.mass_drift = std::max(tr.mass_drift, std::abs(tr.records.back().mass - mass0) / std::max(std::abs(mass0), 1e-300));
        if (t == target) {
            tr.times.push_back(t);
            tr.snapshots.push_back(F);
            ++next;
        }
    }
    return tr;
}

// ---------------------------------------------------------------------------
// Diffusion limit.

/// Soft energy shell at E: nodes with |omega - E| <= cutoff * eta carry the
/// shell weights rho_j = w_j delta_eta(omega_j - E), and the generator moves
/// a particle from i to j at rate 2 pi theta(k_i - k_j) rho_j (diagonal set
/// to minus the row sum). The generator satisfies detailed balance with
/// respect to rho, which is therefore the invariant shell-weighted measure.
struct ShellBand {
    static constexpr double cutoff = 4.0;  // weights beyond are below e^{-8} of the peak

    double energy = 0.0;
    double eta = 0.0;
    std::vector<std::size_t> nodes;
    GridPtr grid;  ///< band nodes, weighted by rho
    Eigen::MatrixXd generator;
    Eigen::MatrixXd velocity;  ///< nodes x d
    Eigen::VectorXd measure;   ///< normalized shell weights

    std::size_t size() const { return nodes.size(); }
};

inline ShellBand shell_band(const CollisionMatrix& M, double E, double eta)
{
    if (!(eta > 0.0)) throw DomainError("shell band width eta must be positive");
    const auto& grid = *M.grid();
    const auto& model = M.model();
    ShellBand b;
    b.energy = E;
    b.eta = eta;
    const auto& w = M.energies();
    for (std::size_t i = 0; i < w.size(); ++i)
        if (std::abs(w[i] - E) <= ShellBand::cutoff * eta) b.nodes.push_back(i);
    if (b.nodes.empty())
        throw EmptyShell("no grid node within " + std::to_string(ShellBand::cutoff * eta) + " of E=" + std::to_string(E));
    if (b.nodes.size() < 2) throw DegenerateShell("energy shell at E=" + std::to_string(E) + " holds a single node");
    if (b.nodes.size() > CollisionMatrix::dense_limit)
        throw SizeError("shell band with " + std::to_string(b.nodes.size()) + " nodes is too large");
    const auto sub = grid.subset(b.nodes);
    const auto n = static_cast<Eigen::Index>(b.nodes.size());
    Eigen::VectorXd rho(n);
    for (Eigen::Index i = 0; i < n; ++i)
        rho(i) = sub.weight(static_cast<std::size_t>(i)) * smeared_delta(w[b.nodes[static_cast<std::size_t>(i)]] - E, eta);
    b.grid = make_grid(sub.reweighted(std::vector<double>(rho.data(), rho.data() + n)));
    b.generator = Eigen::MatrixXd::Zero(n, n);
    parallel_for(static_cast<std::size_t>(n), [&](std::size_t i) {
        const auto ii = static_cast<Eigen::Index>(i);
        for (Eigen::Index j = 0; j < n; ++j) {
            if (j == ii) continue;
            const double th =
                M.spectrum()(b.grid->node(i) - b.grid->node(static_cast<std::size_t>(j)), model.on_torus());
            if (th < 0.0) throw InvalidSpectrum("disorder spectrum negative at a grid difference vector");
            b.generator(ii, j) = two_pi * th * rho(j);
        }
    });
    for (Eigen::Index i = 0; i < n; ++i) b.generator(i, i) = -b.generator.row(i).sum();
    const int d = model.dim();
    const auto vel = detail::node_velocities(*b.grid, model);
    b.velocity.resize(n, d);
    for (Eigen::Index i = 0; i < n; ++i)
        for (int a = 0; a < d; ++a) b.velocity(i, a) = vel[static_cast<std::size_t>(i)][a];
    b.measure = rho / rho.sum();
    return b;
}

enum class DiffusionMethod { ChapmanEnskog, GreenKubo, MsdFit };

inline std::string to_string(DiffusionMethod m)
{
    switch (m) {
    case DiffusionMethod::ChapmanEnskog: return "chapman-enskog";
    case DiffusionMethod::GreenKubo: return "green-kubo";
    case DiffusionMethod::MsdFit: return "msd-fit";
    }
    return "?";
}

struct DiffusionReport {
    double energy = 0.0;
    double eta = 0.0;
    DiffusionMethod method = DiffusionMethod::ChapmanEnskog;
    double D = NAN;  ///< value of `method`
    double D_ce = NAN;
    double D_gk = NAN;
    double D_msd = NAN;
    std::size_t band_size = 0;
    double gap = NAN;             ///< smallest nonzero rate of -M on the band
    double max_rate = NAN;        ///< largest rate of -M on the band
    std::size_t deflated = 0;     ///< eigenvalues treated as null
    double mean_velocity = NAN;   ///< |<v>_E|
    double ce_residual = NAN;     ///< ||M chi + v - <v>|| / ||v - <v>|| in the invariant measure
    double gk_cutoff = NAN;       ///< quadrature end, 12 / gap
    double gk_tail = NAN;         ///< exponential-tail share of D_gk
    double ce_gk_rel_diff = NAN;
    double msd_slope = NAN;       ///< d x per-axis variance slope, compared with 2 d D
    double msd_window_start = NAN;
    double msd_window_end = NAN;
    double msd_mass_drift = NAN;
    /// d times the axis-0 spatial variance at every recorded macro step
    std::vector<double> msd_times;
    std::vector<double> msd_values;
};

namespace detail {

struct BandSpectrum {
    Eigen::MatrixXd U;
    Eigen::VectorXd mu;  // eigenvalues of -S, ascending
    Eigen::VectorXd sqrt_w;
    double gap = 0.0;
    std::size_t nulls = 0;
};

inline BandSpectrum band_spectrum(const ShellBand& b)
{
    BandSpectrum s;
    s.sqrt_w = b.measure.cwiseSqrt();
    Eigen::MatrixXd S = -(s.sqrt_w.asDiagonal() * b.generator * s.sqrt_w.cwiseInverse().asDiagonal());
    S = 0.5 * (S + S.transpose());
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(S);
    s.U = es.eigenvectors();
    s.mu = es.eigenvalues();
    const Eigen::Index n = s.mu.size();
    const double top = std::max(std::abs(s.mu(n - 1)), 1e-300);
    // numerical zeros first, then the deflation rule relative to the gap
    std::size_t zeros = 0;
    while (static_cast<Eigen::Index>(zeros) < n && s.mu(static_cast<Eigen::Index>(zeros)) <= 1e-12 * top) ++zeros;
    if (static_cast<Eigen::Index>(zeros) == n) throw DegenerateShell("collision generator vanishes on the shell band");
    s.gap = s.mu(static_cast<Eigen::Index>(zeros));
    s.nulls = 0;
    while (static_cast<Eigen::Index>(s.nulls) < n && s.mu(static_cast<Eigen::Index>(s.nulls)) < 1e-10 * s.gap) ++s.nulls;
    if (s.nulls > 1)
        throw DegenerateShell("energy shell at E=" + std::to_string(b.energy) + " is disconnected ("
                              + std::to_string(s.nulls) + " null modes)");
    return s;
}

} // namespace detail

/// Chapman-Enskog diffusion coefficient on the shell band |omega - E| <= eta
/// with the Green-Kubo cross-check. D = (1/d) <v . chi> with M chi = -(v - <v>)
/// solved by eigendecomposition with the constant mode deflated; D_GK is the
/// time integral of the velocity autocorrelation, integrated with RK4 and
/// Simpson's rule up to 12/gap and completed by an exponential tail.
inline DiffusionReport diffusion_coefficient(const CollisionMatrix& M, const DispersionModel& model, double E,
                                             double eta = NAN)
{
    if (model.kind() != M.model().kind() || model.dim() != M.model().dim())
        throw ContractViolation("diffusion_coefficient: dispersion differs from the collision matrix");
    if (!std::isfinite(eta)) eta = M.eta();
    const auto band = shell_band(M, E, eta);
    const auto sp = detail::band_spectrum(band);
    const int d = model.dim();
    const Eigen::Index n = static_cast<Eigen::Index>(band.size());

    DiffusionReport rep;
    rep.energy = E;
    rep.eta = eta;
    rep.band_size = band.size();
    rep.gap = sp.gap;
    rep.max_rate = sp.mu(n - 1);
    rep.deflated = sp.nulls;

    const Eigen::RowVectorXd vbar = band.measure.transpose() * band.velocity;
    rep.mean_velocity = vbar.norm();
    const Eigen::MatrixXd b = band.velocity.rowwise() - vbar;

    // Chapman-Enskog in the symmetrized basis y = sqrt(pi) chi
    const Eigen::MatrixXd beta = sp.sqrt_w.asDiagonal() * b;
    Eigen::MatrixXd coef = sp.U.transpose() * beta;
    for (Eigen::Index k = 0; k < n; ++k) coef.row(k) *= k < static_cast<Eigen::Index>(sp.nulls) ? 0.0 : 1.0 / sp.mu(k);
    const Eigen::MatrixXd chi = sp.sqrt_w.cwiseInverse().asDiagonal() * (sp.U * coef);
    double dce = 0.0;
    for (int a = 0; a < d; ++a) dce += band.measure.dot(b.col(a).cwiseProduct(chi.col(a)));
    rep.D_ce = dce / d;
    const Eigen::MatrixXd res = band.generator * chi + b;
    double rn = 0.0, bn = 0.0;
    for (int a = 0; a < d; ++a) {
        rn += band.measure.dot(res.col(a).cwiseAbs2());
        bn += band.measure.dot(b.col(a).cwiseAbs2());
    }
    rep.ce_residual = bn > 0.0 ? std::sqrt(rn / bn) : 0.0;

    // Green-Kubo: u' = M u, u(0) = v - <v>, c(t) = (1/d) <b . u(t)>
    const double T = 12.0 / sp.gap;
    auto steps = static_cast<std::size_t>(std::ceil(T * rep.max_rate / 0.1));
    steps = std::max<std::size_t>(steps + steps % 2, 200);
    const double h = T / static_cast<double>(steps);
    auto corr = [&](const Eigen::MatrixXd& u) {
        double s = 0.0;
        for (int a = 0; a < d; ++a) s += band.measure.dot(b.col(a).cwiseProduct(u.col(a)));
        return s / d;
    };
    Eigen::MatrixXd u = b;
    std::vector<double> c{corr(u)};
    for (std::size_t s = 0; s < steps; ++s) {
        const Eigen::MatrixXd k1 = band.generator * u;
        const Eigen::MatrixXd k2 = band.generator * (u + 0.5 * h * k1);
        const Eigen::MatrixXd k3 = band.generator * (u + 0.5 * h * k2);
        const Eigen::MatrixXd k4 = band.generator * (u + h * k3);
        u += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        c.push_back(corr(u));
    }
    double integral = c.front() + c.back();
    for (std::size_t s = 1; s < steps; ++s) integral += (s % 2 ? 4.0 : 2.0) * c[s];
    integral *= h / 3.0;
    double tail = 0.0;
    const double cT = c.back(), cP = c[c.size() - 2];
    if (cT > 0.0 && cP > cT) tail = cT * h / std::log(cP / cT);
    rep.D_gk = integral + tail;
    rep.gk_cutoff = T;
    rep.gk_tail = rep.D_gk != 0.0 ? tail / rep.D_gk : 0.0;
    rep.ce_gk_rel_diff = std::abs(rep.D_ce - rep.D_gk) / std::abs(rep.D_ce);
    rep.D = rep.D_ce;
    return rep;
}

struct MsdOptions {
    std::size_t cells = 256;
    double dt_gap = 0.1;      ///< splitting step in units of 1/gap
    double t_end_gap = 30.0;  ///< run length in units of 1/gap
    double window_gap = 3.0;  ///< ballistic transient discarded, in units of 1/gap
};

/// Mean-square-displacement estimate of D on the same shell band: a slab
/// bump uniform over the band spreads along axis 0 of a (cells, 1, 1) box
/// under solve_inhomogeneous with spectral flight and the exact collision
/// flow. By cubic symmetry the axis-0 variance slope is 2D; msd_slope
/// reports d times it. Fills the MSD fields of `rep` (from
/// diffusion_coefficient, for the gap) and returns it with method MsdFit.
inline DiffusionReport msd_diffusion(const CollisionMatrix& M, const DispersionModel& model, DiffusionReport rep,
                                     MsdOptions opt = {})
{
    require(opt.cells >= 16, "msd_diffusion needs at least 16 cells");
    const auto band = shell_band(M, rep.energy, rep.eta);
    const int d = model.dim();
    // box sized from the relaxation-time estimate of D
    const Eigen::Index n = static_cast<Eigen::Index>(band.size());
    const Eigen::MatrixXd& Ab = band.generator;
    double d_est = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
        const double l = -Ab(i, i);
        require(l > 0.0, "msd_diffusion: band node without collisions");
        d_est += band.measure(i) * band.velocity.row(i).squaredNorm() / l;
    }
    d_est /= d;
    const double t_end = opt.t_end_gap / rep.gap;
    const double spread = std::sqrt(2.0 * d_est * t_end);
    // the half box holds cells/32 diffusion lengths
    const double cell = spread / 16.0;
    SpatialGrid space;
    space.dim = d;
    space.cells = {opt.cells, 1, 1};
    space.cell_size = cell;
    WignerField F(space, band.grid, Statistics::Boltzmann);
    const double x0 = 0.5 * space.side(0), sigma = 4.0 * cell;
    for (std::size_t c = 0; c < F.cells(); ++c) {
        const double x = space.center(c)[0] - x0;
        const double g = std::exp(-0.5 * x * x / (sigma * sigma));
        for (std::size_t k = 0; k < F.nodes(); ++k) F.at(c, k) = g;
    }
    const auto C = CollisionHandle::generator(band.grid, model, band.generator);
    SolverConfig cfg;
    cfg.dt = opt.dt_gap / rep.gap;
    cfg.dt_min = cfg.dt * 1e-6;
    cfg.t_max = t_end;
    cfg.splitting = SplittingOrder::Strang;
    InhomogeneousOptions io;
    io.flight = FlightScheme::Spectral;
    io.reference = Vec{x0, 0.0, 0.0};
    const auto tr = solve_inhomogeneous(F, C, model, cfg, io);
    std::vector<double> ts, vs;
    const double t0 = opt.window_gap / rep.gap;
    for (const auto& r : tr.records) {
        rep.msd_times.push_back(r.t);
        rep.msd_values.push_back(d * r.variance[0]);
    }
    for (const auto& r : tr.records)
        if (r.t >= t0 - 1e-12 * t_end) {
            ts.push_back(r.t);
            vs.push_back(r.variance[0]);
        }
    require(ts.size() >= 3, "msd_diffusion: fit window holds fewer than three samples");
    const auto fit = fit_line(ts, vs);
    rep.msd_slope = d * fit.slope;
    rep.D_msd = 0.5 * fit.slope;
    rep.msd_window_start = ts.front();
    rep.msd_window_end = ts.back();
    rep.msd_mass_drift = tr.mass_drift;
    rep.method = DiffusionMethod::MsdFit;
    rep.D = rep.D_msd;
    return rep;
}

struct DiffusionLadder {
    double energy = 0.0;
    double spacing = 0.0;  ///< shell energy spacing
    std::vector<double> eta;
    std::vector<DiffusionReport> reports;
    /// Linear extrapolation of D_ce to eta = 0 from the last two rungs.
    double extrapolated = NAN;
    bool extrapolated_flag = true;
};

/// D_ce at eta = m * (shell energy spacing) for each multiple, and the
/// linear extrapolation to eta = 0.
inline DiffusionLadder diffusion_eta_ladder(GridPtr grid, const DispersionModel& model, const Spectrum& spectrum, double E,
                                            std::vector<double> multiples = {2.0, 4.0})
{
    require(multiples.size() >= 2, "eta ladder needs at least two rungs");
    DiffusionLadder lad;
    lad.energy = E;
    lad.spacing = shell_energy_spacing(*grid, model, E);
    for (double m : multiples) {
        const double eta = m * lad.spacing;
        const CollisionMatrix M(grid, model, spectrum, eta);
        lad.eta.push_back(eta);
        lad.reports.push_back(diffusion_coefficient(M, model, E, eta));
    }
    const std::size_t k = lad.eta.size();
    const double e1 = lad.eta[k - 2], e2 = lad.eta[k - 1];
    const double d1 = lad.reports[k - 2].D_ce, d2 = lad.reports[k - 1].D_ce;
    lad.extrapolated = d1 - e1 * (d2 - d1) / (e2 - e1);
    return lad;
}

} // namespace qkin

#endif // QKIN_TRANSPORT_HPP
