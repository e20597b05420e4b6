#include <gtest/gtest.h>

#include <random>

#include "qkin/quasifree.hpp"
#include "qkin/transport.hpp"

using namespace qkin;

namespace {

const auto lattice3 = DispersionModel::lattice(3);
const auto continuum3 = DispersionModel::continuum(3);

double l1(const MomentumGrid& g, std::span<const double> a, std::span<const double> b)
{
    std::vector<double> d(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) d[i] = std::abs(a[i] - b[i]);
    return integrate(g, d);
}

double max_diff(std::span<const double> a, std::span<const double> b)
{
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

std::vector<double> random_positive(std::size_t n, std::uint64_t seed, double lo = 0.1, double hi = 1.0)
{
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(lo, hi);
    std::vector<double> v(n);
    for (auto& x : v) x = u(rng);
    return v;
}

// exp(M t) for a generator symmetric in the uniform-weight inner product
struct EigenOracle {
    Eigen::MatrixXd V;
    Eigen::VectorXd lam;
    explicit EigenOracle(const Eigen::MatrixXd& M)
    {
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (M + M.transpose()));
        V = es.eigenvectors();
        lam = es.eigenvalues();
    }
    std::vector<double> propagate(const std::vector<double>& w, double t) const
    {
        const Eigen::Map<const Eigen::VectorXd> x(w.data(), static_cast<Eigen::Index>(w.size()));
        const Eigen::VectorXd y = V * ((lam * t).array().exp().matrix().asDiagonal() * (V.transpose() * x));
        return std::vector<double>(y.data(), y.data() + y.size());
    }
};

WignerField bump_field(const SpatialGrid& sp, GridPtr g, Statistics st, const std::vector<double>& Wk, double sigma)
{
    WignerField F(sp, g, st);
    for (std::size_t c = 0; c < F.cells(); ++c) {
        const Vec x = sp.center(c);
        double r2 = 0.0;
        for (int a = 0; a < sp.dim; ++a)
            if (sp.cells[a] > 1) r2 += (x[a] - 0.5 * sp.side(a)) * (x[a] - 0.5 * sp.side(a));
        const double gr = std::exp(-0.5 * r2 / (sigma * sigma));
        for (std::size_t k = 0; k < F.nodes(); ++k) F.at(c, k) = gr * Wk[k];
    }
    return F;
}

} // namespace

// ---------------------------------------------------------------------------

TEST(AdaptiveRk4, NonFiniteFullStepIsRejected)
{
    // y' = -y; the rhs is undefined below 0.3, which only the last stage of the big step reaches
    SolverConfig cfg;
    cfg.dt = 1.0;
    cfg.dt_min = 1e-6;
    cfg.tolerance = 1e-10;
    std::vector<double> y{1.0};
    AdaptiveRk4 rk(cfg);
    const auto st = rk.run(y, 0.0, 1.0, [](std::span<const double> w, std::span<double> dw) {
        dw[0] = w[0] < 0.3 ? NAN : -w[0];
    });
    EXPECT_GT(st.rejected, 0u);
    EXPECT_NEAR(y[0], std::exp(-1.0), 1e-7);
}

TEST(Homogeneous, ZeroCollisionIsConstant)
{
    auto g = make_grid(grid_for(lattice3, 6));
    const Distribution W0(g, random_positive(g->size(), 1), Statistics::Boltzmann);
    SolverConfig cfg;
    cfg.t_max = 2.0;
    cfg.snapshot_every = 0.5;
    const auto tr = solve_homogeneous(W0, CollisionHandle::none(g, lattice3, Statistics::Boltzmann), cfg);
    ASSERT_EQ(tr.times.size(), 5u);
    for (const auto& s : tr.snapshots) EXPECT_EQ(s, W0.values);
    EXPECT_EQ(tr.mass_drift, 0.0);
    EXPECT_EQ(tr.min_entropy_increment, 0.0);
}

TEST(Homogeneous, LinearShellDecayMatchesEigenOracle)
{
    auto g = make_grid(grid_for(lattice3, 12));
    auto M = std::make_shared<const CollisionMatrix>(g, lattice3, Spectrum::gaussian(1.0, 1.0), 0.3,
                                                     MatrixStorage::Dense);
    const auto lv = group_levels(M->energies(), 1e-9);
    const double gap = shell_spectral_gap(*M, lv);
    ASSERT_GT(gap, 0.0);
    const Distribution W0(g, random_positive(g->size(), 2), Statistics::Boltzmann);
    SolverConfig cfg;
    cfg.t_max = 5.0 / gap;
    cfg.tolerance = 1e-10;
    const auto tr = solve_homogeneous(W0, CollisionHandle::linear(M), cfg);
    const EigenOracle oracle(M->dense());
    const auto ref = oracle.propagate(W0.values, cfg.t_max);
    EXPECT_LT(max_diff(tr.snapshots.back(), ref), 1e-7);
    const double d0 = shell_deviation(*g, lv, W0.values);
    const double d1 = shell_deviation(*g, lv, tr.snapshots.back());
    const double dref = shell_deviation(*g, lv, ref);
    EXPECT_NEAR(d1, dref, 1e-6 * d0);
    EXPECT_LE(d1 / d0, 1.2 * std::exp(-5.0));
    EXPECT_LT(tr.mass_drift, 1e-10);
    EXPECT_GE(tr.min_entropy_increment, -1e-10);
}

TEST(Homogeneous, RejectsInadmissibleStart)
{
    auto g = make_grid(grid_for(lattice3, 4));
    std::vector<double> v(g->size(), 0.5);
    v[3] = 1.5;
    EXPECT_THROW(solve_homogeneous(Distribution(g, v, Statistics::Fermion),
                                   CollisionHandle::none(g, lattice3, Statistics::Fermion), SolverConfig{}),
                 InvariantViolation);
}

TEST(Homogeneous, OvershootingStepsAreRejected)
{
    // two nodes exchanging at rate 40 from (0, 1): an initial step of 1 would
    // leave [0, 1]; the integrator must shrink it instead of clipping
    auto g = make_grid(grid_for(lattice3, 4));
    const auto n = static_cast<Eigen::Index>(g->size());
    Eigen::MatrixXd B = Eigen::MatrixXd::Zero(n, n);
    B(0, 0) = B(1, 1) = -40.0;
    B(0, 1) = B(1, 0) = 40.0;
    const auto C = CollisionHandle::generator(g, lattice3, B, Statistics::Fermion);
    std::vector<double> v(g->size(), 0.5);
    v[0] = 0.0;
    v[1] = 1.0;
    SolverConfig cfg;
    cfg.t_max = 1.0;
    cfg.dt = 1.0;
    const auto tr = solve_homogeneous(Distribution(g, v, Statistics::Fermion), C, cfg);
    EXPECT_GT(tr.ode.rejected, 0u);
    for (const auto& s : tr.snapshots) EXPECT_TRUE(is_admissible(s, Statistics::Fermion));
    EXPECT_NEAR(tr.snapshots.back()[0], 0.5, 1e-6);
    EXPECT_LT(tr.mass_drift, 1e-12);
}

// ---------------------------------------------------------------------------

class UuRelaxation : public ::testing::Test {
protected:
    static void SetUpTestSuite()
    {
        grid_ = make_grid(grid_for(continuum3, 8, 4.0));
        const auto st = Statistics::Fermion;
        const auto A = thermal_distribution(continuum3, grid_, 0.3, 0.6, st);
        const auto B = thermal_distribution(continuum3, grid_, 0.6, 0.1, st, {0.3, 0.0, 0.0});
        W0_ = Distribution(grid_, 0.0, st);
        for (std::size_t i = 0; i < grid_->size(); ++i) W0_.values[i] = 0.5 * (A.values[i] + B.values[i]);
        op_ = std::make_shared<const UuOperator>(grid_, continuum3, PairPotential::gaussian(1.0, 1.5), st,
                                                  UuQuadrature::sphere(16));
        SolverConfig cfg;
        cfg.dt = 0.1;
        cfg.t_max = kTmax;
        cfg.snapshot_every = kTmax / 4;
        cfg.tolerance = 1e-7;
        traj_ = new Trajectory(solve_homogeneous(W0_, CollisionHandle::uu(op_), cfg));
    }
    static void TearDownTestSuite() { delete traj_; }

    static constexpr double kTmax = 8.0;
    static inline GridPtr grid_;
    static inline Distribution W0_;
    static inline std::shared_ptr<const UuOperator> op_;
    static inline Trajectory* traj_ = nullptr;
};

TEST_F(UuRelaxation, ConservesMomentsAndEntropyIsMonotone)
{
    EXPECT_LT(traj_->mass_drift, 1e-10);
    EXPECT_LT(traj_->momentum_drift, 1e-8);
    EXPECT_LT(traj_->energy_drift, 1e-8);
    EXPECT_GE(traj_->min_entropy_increment, -1e-10);
    EXPECT_GT(traj_->steps.back().entropy, traj_->steps.front().entropy);
}

TEST_F(UuRelaxation, SnapshotsStayWithinPauliBounds)
{
    for (const auto& s : traj_->snapshots) EXPECT_TRUE(is_admissible(s, Statistics::Fermion));
}

TEST_F(UuRelaxation, ConvergesToMatchedThermalState)
{
    const auto m0 = moments(W0_, continuum3);
    const auto p = match_thermal(continuum3, grid_, Statistics::Fermion, m0);
    ASSERT_LT(p.residual, 1e-10);
    const auto Wt = thermal_distribution(continuum3, grid_, p.T, p.mu, Statistics::Fermion, p.drift);
    const double d0 = l1(*grid_, W0_.values, Wt.values);
    const double d1 = l1(*grid_, traj_->snapshots.back(), Wt.values);
    EXPECT_GT(d0, 1e-2);
    EXPECT_LT(d1, 1e-3);
    // distance shrinks between snapshots
    for (std::size_t s = 1; s < traj_->snapshots.size(); ++s)
        EXPECT_LT(l1(*grid_, traj_->snapshots[s], Wt.values), l1(*grid_, traj_->snapshots[s - 1], Wt.values));
}

// ---------------------------------------------------------------------------

TEST(ShortTime, ZeroCollisionGivesZeroResidual)
{
    auto g = make_grid(grid_for(lattice3, 4));
    const Distribution W0(g, random_positive(g->size(), 3), Statistics::Boltzmann);
    const auto rep = short_time_check(W0, CollisionHandle::none(g, lattice3, Statistics::Boltzmann), {1e-3, 1e-2, 1e-1});
    for (double e : rep.e) EXPECT_EQ(e, 0.0);
    EXPECT_TRUE(rep.vanishing);
}

TEST(ShortTime, RejectsNarrowTimeList)
{
    auto g = make_grid(grid_for(lattice3, 4));
    const Distribution W0(g, 0.5, Statistics::Boltzmann);
    const auto C = CollisionHandle::none(g, lattice3, Statistics::Boltzmann);
    EXPECT_THROW(short_time_check(W0, C, {1e-3, 5e-3}), ContractViolation);
    EXPECT_THROW(short_time_check(W0, C, {0.0, 1e-1}), ContractViolation);
}

TEST(ShortTime, LinearMatchesMatrixExponential)
{
    auto g = make_grid(grid_for(lattice3, 8));
    auto M = std::make_shared<const CollisionMatrix>(g, lattice3, Spectrum::constant(1.0), 0.4, MatrixStorage::Dense);
    const Distribution W0(g, random_positive(g->size(), 4), Statistics::Boltzmann);
    const std::vector<double> ts{1e-3, 2e-3, 5e-3, 1e-2, 2e-2};
    const auto rep = short_time_check(W0, CollisionHandle::linear(M), ts);
    const EigenOracle oracle(M->dense());
    const auto c0 = M->apply(W0.values);
    for (std::size_t j = 0; j < ts.size(); ++j) {
        const double t = ts[j];
        const auto wt = oracle.propagate(W0.values, t);
        std::vector<double> r(wt.size());
        for (std::size_t i = 0; i < r.size(); ++i) r[i] = std::abs((wt[i] - W0.values[i]) / t - c0[i]);
        const double e = integrate(*g, r);
        EXPECT_NEAR(rep.e[j], e, 1e-6 * e) << "t=" << t;
    }
    EXPECT_GE(rep.order, 0.9);
    EXPECT_LE(rep.order, 1.1);
}

TEST(ShortTime, UuOrderIsOne)
{
    auto g = make_grid(grid_for(continuum3, 6, 3.0));
    const auto st = Statistics::Fermion;
    const auto A = thermal_distribution(continuum3, g, 0.4, 0.6, st);
    const auto B = thermal_distribution(continuum3, g, 0.8, 0.1, st, {0.4, -0.2, 0.0});
    Distribution W0(g, 0.0, st);
    for (std::size_t i = 0; i < g->size(); ++i) W0.values[i] = 0.5 * (A.values[i] + B.values[i]);
    auto op = std::make_shared<const UuOperator>(g, continuum3, PairPotential::gaussian(1.0, 1.5), st,
                                                 UuQuadrature::sphere(16));
    const auto rep = short_time_check(W0, CollisionHandle::uu(op), {1e-3, 3e-3, 1e-2, 3e-2});
    EXPECT_FALSE(rep.vanishing);
    EXPECT_GE(rep.order, 0.9);
    EXPECT_LE(rep.order, 1.1);
}

// ---------------------------------------------------------------------------

TEST(FreeFlight, ZeroStepIsIdentityAndNegativeRejected)
{
    auto g = make_grid(grid_for(lattice3, 4));
    WignerField F(SpatialGrid::cube(3, 4, 8.0), g, Statistics::Boltzmann);
    F.values = random_positive(F.values.size(), 5);
    EXPECT_EQ(free_flight(F, lattice3, 0.0).values, F.values);
    EXPECT_EQ(free_flight(F, lattice3, 0.0, FlightScheme::Spectral).values, F.values);
    EXPECT_THROW(free_flight(F, lattice3, -0.1), DomainError);
}

TEST(FreeFlight, RestNodeKeepsProfile)
{
    // odd box grids contain k = 0, where the continuum velocity vanishes
    auto g = make_grid(grid_for(continuum3, 5, 2.0));
    std::size_t zero = g->size();
    for (std::size_t i = 0; i < g->size(); ++i)
        if (norm2(g->node(i)) == 0.0) zero = i;
    ASSERT_LT(zero, g->size());
    const auto sp = SpatialGrid::cube(3, 6, 6.0);
    WignerField F(sp, g, Statistics::Boltzmann);
    for (std::size_t c = 0; c < F.cells(); ++c) {
        const Vec x = sp.center(c);
        for (std::size_t k = 0; k < F.nodes(); ++k) F.at(c, k) = 1.0 + 0.5 * std::cos(x[0]) * std::sin(2 * x[1]);
    }
    for (auto scheme : {FlightScheme::SemiLagrangian, FlightScheme::Spectral}) {
        const auto G = free_flight(F, continuum3, 0.37, scheme);
        for (std::size_t c = 0; c < F.cells(); ++c) EXPECT_EQ(G.at(c, zero), F.at(c, zero));
    }
}

TEST(FreeFlight, ConservesMassPerNode)
{
    auto g = make_grid(grid_for(lattice3, 4));
    WignerField F(SpatialGrid::cube(3, 8, 8.0), g, Statistics::Boltzmann);
    F.values = random_positive(F.values.size(), 6);
    for (auto scheme : {FlightScheme::SemiLagrangian, FlightScheme::Spectral}) {
        const auto G = free_flight(F, lattice3, 0.731, scheme);
        const auto a = detail::mass_per_node(F), b = detail::mass_per_node(G);
        for (std::size_t k = 0; k < a.size(); ++k) EXPECT_NEAR(b[k], a[k], 1e-12 * a[k]);
        EXPECT_NEAR(G.total_mass(), F.total_mass(), 1e-10 * F.total_mass());
    }
}

TEST(FreeFlight, IntegerShiftIsExactTranslation)
{
    // lattice node k = (pi/2, 0, 0) has velocity (1, 0, 0)
    auto g = make_grid(grid_for(lattice3, 4));
    std::size_t node = g->size();
    for (std::size_t i = 0; i < g->size(); ++i) {
        const Vec& k = g->node(i);
        if (std::abs(k[0] - pi / 2) < 1e-12 && k[1] == 0.0 && k[2] == 0.0) node = i;
    }
    ASSERT_LT(node, g->size());
    SpatialGrid sp;
    sp.dim = 3;
    sp.cells = {16, 1, 1};
    sp.cell_size = 0.5;
    WignerField F(sp, g, Statistics::Boltzmann);
    F.values = random_positive(F.values.size(), 7);
    for (auto scheme : {FlightScheme::SemiLagrangian, FlightScheme::Spectral}) {
        const auto G = free_flight(F, lattice3, 1.5, scheme);  // three cells
        for (std::size_t c = 0; c < 16; ++c) EXPECT_NEAR(G.at((c + 3) % 16, node), F.at(c, node), 1e-12);
    }
}

TEST(FreeFlight, PlaneWaveDampingMatchesInterpolationBound)
{
    // trilinear interpolation multiplies the mode e^{i q x} by
    // (1 - f) + f e^{-i q dx} for a shift of f cells; at a fixed Courant
    // fraction the per-step loss is O(dx^2): halving dx divides it by ~4
    auto g = make_grid(grid_for(lattice3, 4));
    std::size_t node = g->size();
    for (std::size_t i = 0; i < g->size(); ++i) {
        const Vec& k = g->node(i);
        if (std::abs(k[0] - pi / 2) < 1e-12 && k[1] == 0.0 && k[2] == 0.0) node = i;
    }
    ASSERT_LT(node, g->size());
    const double L = 16.0, f = 0.3;
    double loss[2];
    for (int r = 0; r < 2; ++r) {
        SpatialGrid sp;
        sp.dim = 3;
        sp.cells = {static_cast<std::size_t>(32 << r), 1, 1};
        sp.cell_size = L / static_cast<double>(sp.cells[0]);
        WignerField F(sp, g, Statistics::Boltzmann);
        for (std::size_t c = 0; c < F.cells(); ++c)
            for (std::size_t k = 0; k < F.nodes(); ++k) F.at(c, k) = 1.0 + 0.5 * std::cos(two_pi * sp.center(c)[0] / L);
        const auto G = free_flight(F, lattice3, f * sp.cell_size);
        // amplitude of the mode from its Fourier coefficient
        std::complex<double> a0 = 0.0, a1 = 0.0;
        for (std::size_t c = 0; c < F.cells(); ++c) {
            const auto e = std::polar(1.0, -two_pi * sp.center(c)[0] / L);
            a0 += F.at(c, node) * e;
            a1 += G.at(c, node) * e;
        }
        const double amp = std::abs(a1) / std::abs(a0);
        const double th = two_pi * sp.cell_size / L;
        const double bound = std::sqrt(1.0 - 2.0 * f * (1.0 - f) * (1.0 - std::cos(th)));
        EXPECT_NEAR(amp, bound, 1e-12);
        loss[r] = 1.0 - amp;
    }
    EXPECT_NEAR(loss[0] / loss[1], 4.0, 0.05);
}

// ---------------------------------------------------------------------------

TEST(Inhomogeneous, ZeroCollisionMatchesFlightComposition)
{
    auto g = make_grid(grid_for(lattice3, 4));
    const auto sp = SpatialGrid::cube(3, 6, 6.0);
    WignerField F(sp, g, Statistics::Boltzmann);
    F.values = random_positive(F.values.size(), 8);
    SolverConfig cfg;
    cfg.dt = 0.25;
    cfg.t_max = 1.0;
    const auto tr = solve_inhomogeneous(F, CollisionHandle::none(g, lattice3, Statistics::Boltzmann), lattice3, cfg);
    WignerField G = F;
    for (int s = 0; s < 4; ++s) {
        free_flight_inplace(G, lattice3, 0.125);
        free_flight_inplace(G, lattice3, 0.125);
    }
    EXPECT_EQ(tr.final_field().values, G.values);
    EXPECT_EQ(tr.steps, 4u);
}

TEST(Inhomogeneous, UniformFieldFollowsHomogeneousSolution)
{
    auto g = make_grid(grid_for(lattice3, 6));
    auto M = std::make_shared<const CollisionMatrix>(g, lattice3, Spectrum::gaussian(1.0, 1.2), 0.4);
    const auto Wk = random_positive(g->size(), 9);
    const auto sp = SpatialGrid::cube(3, 3, 3.0);
    WignerField F(sp, g, Statistics::Boltzmann);
    for (std::size_t c = 0; c < F.cells(); ++c)
        for (std::size_t k = 0; k < F.nodes(); ++k) F.at(c, k) = Wk[k];
    SolverConfig cfg;
    cfg.dt = 0.2;
    cfg.t_max = 2.0;
    cfg.tolerance = 1e-13;
    const auto C = CollisionHandle::linear(M);
    const auto tr = solve_inhomogeneous(F, C, lattice3, cfg);
    const auto hom = solve_homogeneous(Distribution(g, Wk, Statistics::Boltzmann), C, cfg);
    for (std::size_t c = 0; c < F.cells(); ++c)
        EXPECT_LT(max_diff(tr.final_field().cell(c), hom.snapshots.back()), 1e-10) << "cell " << c;
}

TEST(Inhomogeneous, BumpConservesMass)
{
    auto g = make_grid(grid_for(lattice3, 6));
    auto M = std::make_shared<const CollisionMatrix>(g, lattice3, Spectrum::constant(1.0), 0.4);
    const auto sp = SpatialGrid::cube(3, 8, 8.0);
    const auto F = bump_field(sp, g, Statistics::Boltzmann, random_positive(g->size(), 10), 1.5);
    SolverConfig cfg;
    cfg.dt = 0.1;
    cfg.t_max = 2.0;
    const auto tr = solve_inhomogeneous(F, CollisionHandle::linear(M), lattice3, cfg);
    EXPECT_LT(tr.mass_drift, 1e-8);
    EXPECT_EQ(tr.records.size(), tr.steps + 1);
    // the bump spreads
    EXPECT_GT(tr.records.back().variance[0], tr.records.front().variance[0]);
}

namespace {

WignerField splitting_run(SplittingOrder order, double dt)
{
    auto g = make_grid(grid_for(lattice3, 4));
    auto M = std::make_shared<const CollisionMatrix>(g, lattice3, Spectrum::gaussian(1.0, 1.0), 0.5, MatrixStorage::Dense);
    SpatialGrid sp;
    sp.dim = 3;
    sp.cells = {16, 1, 1};
    sp.cell_size = 0.5;
    WignerField F(sp, g, Statistics::Boltzmann);
    const auto Wk = random_positive(g->size(), 11, 0.5, 1.0);
    for (std::size_t c = 0; c < F.cells(); ++c)
        for (std::size_t k = 0; k < F.nodes(); ++k)
            F.at(c, k) = Wk[k] * (1.0 + 0.4 * std::cos(two_pi * sp.center(c)[0] / sp.side(0) + 0.3 * static_cast<double>(k)));
    SolverConfig cfg;
    cfg.dt = dt;
    cfg.t_max = 1.0;
    cfg.tolerance = 1e-13;
    cfg.splitting = order;
    InhomogeneousOptions opt;
    opt.flight = FlightScheme::Spectral;
    return solve_inhomogeneous(F, CollisionHandle::linear(M), lattice3, cfg, opt).final_field();
}

} // namespace

TEST(Inhomogeneous, StrangSplittingIsSecondOrder)
{
    const auto a = splitting_run(SplittingOrder::Strang, 0.1);
    const auto b = splitting_run(SplittingOrder::Strang, 0.05);
    const auto c = splitting_run(SplittingOrder::Strang, 0.025);
    const double ratio = max_diff(a.values, b.values) / max_diff(b.values, c.values);
    EXPECT_NEAR(ratio, 4.0, 0.4);
}

TEST(Inhomogeneous, LieSplittingIsFirstOrder)
{
    const auto a = splitting_run(SplittingOrder::Lie, 0.1);
    const auto b = splitting_run(SplittingOrder::Lie, 0.05);
    const auto c = splitting_run(SplittingOrder::Lie, 0.025);
    const double ratio = max_diff(a.values, b.values) / max_diff(b.values, c.values);
    EXPECT_NEAR(ratio, 2.0, 0.3);
}

TEST(Inhomogeneous, GeneratorFlowMatchesRungeKutta)
{
    auto g = make_grid(grid_for(lattice3, 4));
    auto M = std::make_shared<const CollisionMatrix>(g, lattice3, Spectrum::gaussian(1.0, 1.0), 0.5, MatrixStorage::Dense);
    const auto sp = SpatialGrid::cube(3, 4, 4.0);
    const auto F = bump_field(sp, g, Statistics::Boltzmann, random_positive(g->size(), 12), 1.0);
    SolverConfig cfg;
    cfg.dt = 0.1;
    cfg.t_max = 1.0;
    cfg.tolerance = 1e-13;
    const auto a = solve_inhomogeneous(F, CollisionHandle::linear(M), lattice3, cfg);
    const auto b = solve_inhomogeneous(F, CollisionHandle::generator(g, lattice3, M->dense()), lattice3, cfg);
    EXPECT_LT(max_diff(a.final_field().values, b.final_field().values), 1e-10);
}

// ---------------------------------------------------------------------------

TEST(Diffusion, ConstantSpectrumMatchesRelaxationTime)
{
    // constant spectrum: every node leaves at the same total rate
    // 2 pi sum_j rho_j (the excluded diagonal term is restored by k -> -k
    // symmetry), so chi = v / rate and D = <|v|^2> / (d rate)
    auto g = make_grid(grid_for(lattice3, 12));
    const CollisionMatrix M(g, lattice3, Spectrum::constant(1.0), auto_eta(*g, lattice3, 3.0));
    const auto rep = diffusion_coefficient(M, lattice3, 3.0);
    const auto band = shell_band(M, 3.0, M.eta());
    double rate = 0.0, v2 = 0.0;
    for (std::size_t i = 0; i < band.size(); ++i) {
        rate += two_pi * g->weight(band.nodes[i]) * smeared_delta(M.energies()[band.nodes[i]] - 3.0, M.eta());
        v2 += band.measure(static_cast<Eigen::Index>(i)) * band.velocity.row(static_cast<Eigen::Index>(i)).squaredNorm();
    }
    const double d = v2 / (3.0 * rate);
    EXPECT_NEAR(rep.D_ce, d, 1e-10 * d);
    EXPECT_GT(rep.D_ce, 0.0);
    EXPECT_LT(rep.mean_velocity, 1e-12);
    EXPECT_LT(rep.ce_residual, 1e-10);
    EXPECT_EQ(rep.deflated, 1u);
}

TEST(Diffusion, GreenKuboAgreesWithChapmanEnskog)
{
    auto g = make_grid(grid_for(lattice3, 12));
    const CollisionMatrix M(g, lattice3, Spectrum::gaussian(1.0, 0.8), auto_eta(*g, lattice3, 2.2));
    const auto rep = diffusion_coefficient(M, lattice3, 2.2);
    EXPECT_GT(rep.D_ce, 0.0);
    EXPECT_LT(rep.ce_gk_rel_diff, 1e-2);
    EXPECT_LT(rep.gk_tail, 1e-3);
    EXPECT_NEAR(rep.gk_cutoff, 12.0 / rep.gap, 1e-12 * rep.gk_cutoff);
}

TEST(Diffusion, ScalesInverselyWithSpectrum)
{
    auto g = make_grid(grid_for(lattice3, 10));
    const double eta = auto_eta(*g, lattice3, 2.5);
    const auto s = Spectrum::gaussian(1.0, 1.0);
    const auto a = diffusion_coefficient(CollisionMatrix(g, lattice3, s, eta), lattice3, 2.5);
    const auto b = diffusion_coefficient(CollisionMatrix(g, lattice3, s.scaled(2.5), eta), lattice3, 2.5);
    EXPECT_NEAR(b.D_ce, a.D_ce / 2.5, 1e-10 * a.D_ce);
}

TEST(Diffusion, DisconnectedShellIsDegenerate)
{
    auto g = make_grid(grid_for(lattice3, 8));
    // scattering only within slices of fixed k_0
    const auto s = Spectrum::custom([](const Vec& q, bool) { return std::abs(std::remainder(q[0], two_pi)) < 1e-9 ? 1.0 : 0.0; },
                                    "slices");
    const CollisionMatrix M(g, lattice3, s, 0.3);
    EXPECT_THROW(diffusion_coefficient(M, lattice3, 3.0), DegenerateShell);
    EXPECT_THROW(diffusion_coefficient(M, lattice3, 40.0), EmptyShell);
}

TEST(Diffusion, MsdSlopeMatchesChapmanEnskog)
{
    auto g = make_grid(grid_for(lattice3, 12));
    const CollisionMatrix M(g, lattice3, Spectrum::constant(1.0), auto_eta(*g, lattice3, 3.0));
    const auto ce = diffusion_coefficient(M, lattice3, 3.0);
    const auto rep = msd_diffusion(M, lattice3, ce);
    EXPECT_EQ(rep.method, DiffusionMethod::MsdFit);
    EXPECT_NEAR(rep.msd_slope, 6.0 * ce.D_ce, 0.05 * 6.0 * ce.D_ce);
    EXPECT_NEAR(rep.D_msd, ce.D_ce, 0.05 * ce.D_ce);
    EXPECT_NEAR(rep.msd_window_start, 3.0 / ce.gap, 0.2 / ce.gap);
    EXPECT_LT(rep.msd_mass_drift, 1e-8);
}

TEST(Diffusion, EtaLadderExtrapolates)
{
    auto g = make_grid(grid_for(lattice3, 12));
    const auto lad = diffusion_eta_ladder(g, lattice3, Spectrum::constant(1.0), 3.0);
    ASSERT_EQ(lad.reports.size(), 2u);
    EXPECT_NEAR(lad.eta[0], 2.0 * lad.spacing, 1e-14);
    EXPECT_NEAR(lad.eta[1], 4.0 * lad.spacing, 1e-14);
    const double d1 = lad.reports[0].D_ce, d2 = lad.reports[1].D_ce;
    EXPECT_NEAR(lad.extrapolated, 2.0 * d1 - d2, 1e-12 * d1);
    EXPECT_TRUE(lad.extrapolated_flag);
}

TEST(Diffusion, PositiveAndContinuousInEnergy)
{
    auto g = make_grid(grid_for(lattice3, 12));
    const auto spec = Spectrum::constant(1.0);
    const double eta = auto_eta(*g, lattice3, 3.0);
    const CollisionMatrix M(g, lattice3, spec, eta);
    std::vector<double> E, D;
    for (double e = 1.5; e <= 4.5 + 1e-9; e += 0.25) {
        E.push_back(e);
        D.push_back(diffusion_coefficient(M, lattice3, e, eta).D_ce);
    }
    for (double d : D) EXPECT_GT(d, 0.0);
    // midpoints of the coarse ladder (step 0.5) stay within twice the
    // coarse local increment of their left neighbour
    for (std::size_t i = 0; i + 2 < E.size(); i += 2) {
        const double coarse = std::abs(D[i + 2] - D[i]);
        const double fine = std::abs(D[i + 1] - D[i]);
        EXPECT_LE(fine, 2.0 * coarse + 1e-3 * D[i]) << "E=" << E[i];
    }
}
