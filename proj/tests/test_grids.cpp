#include <gtest/gtest.h>

#include <filesystem>
#include <random>

#include "qkin/grids.hpp"
#include "qkin/io.hpp"

using namespace qkin;

TEST(Grid, TorusWeightsSumToOne)
{
    const auto g = MomentumGrid::torus(3, 8);
    EXPECT_EQ(g.size(), 512u);
    std::vector<double> one(g.size(), 1.0);
    EXPECT_NEAR(integrate(g, one), 1.0, 1e-15);
    for (double w : g.weights()) EXPECT_GT(w, 0.0);
}

TEST(Grid, BoxWeightsSumToVolume)
{
    const auto g = MomentumGrid::box(2, 10, 3.0);
    std::vector<double> one(g.size(), 1.0);
    EXPECT_NEAR(integrate(g, one), 36.0, 1e-12);
    EXPECT_NEAR(g.total_measure(), 36.0, 1e-12);
}

TEST(Grid, IntegrateZeroAndCosine)
{
    const auto g = MomentumGrid::torus(3, 12);
    std::vector<double> z(g.size(), 0.0), c(g.size());
    EXPECT_EQ(integrate(g, z), 0.0);
    for (std::size_t i = 0; i < g.size(); ++i) c[i] = std::cos(g.node(i)[0]);
    EXPECT_NEAR(integrate(g, c), 0.0, 1e-12);
}

TEST(Grid, IntegrateLengthMismatch)
{
    const auto g = MomentumGrid::torus(1, 8);
    std::vector<double> f(7, 1.0);
    EXPECT_THROW(integrate(g, f), ContractViolation);
}

TEST(Grid, IntegrateIsLinear)
{
    const auto g = MomentumGrid::box(3, 9, 4.0);
    std::mt19937_64 rng(1);
    std::normal_distribution<double> n;
    std::vector<double> f(g.size()), h(g.size()), c(g.size());
    for (std::size_t i = 0; i < g.size(); ++i) {
        f[i] = n(rng);
        h[i] = n(rng);
    }
    const double a = 1.7, b = -0.4;
    for (std::size_t i = 0; i < g.size(); ++i) c[i] = a * f[i] + b * h[i];
    const double lhs = integrate(g, c), rhs = a * integrate(g, f) + b * integrate(g, h);
    EXPECT_NEAR(lhs, rhs, 1e-13 * (1.0 + std::abs(rhs)));
}

TEST(Grid, MirrorNodesAreExactNegatives)
{
    for (const auto& g : {MomentumGrid::torus(3, 8), MomentumGrid::torus(2, 7), MomentumGrid::box(3, 6, 2.0)}) {
        for (std::size_t i = 0; i < g.size(); ++i) {
            const Vec a = g.momentum_coordinate(i), b = g.momentum_coordinate(g.mirror_index(i));
            for (int j = 0; j < 3; ++j) ASSERT_EQ(a[j], -b[j]);
        }
    }
}

TEST(Moments, ZeroDistribution)
{
    auto g = make_grid(MomentumGrid::torus(3, 6));
    Distribution W(g, 0.0, Statistics::Boltzmann);
    const auto m = moments(W, DispersionModel::lattice(3));
    EXPECT_EQ(m.mass, 0.0);
    EXPECT_EQ(norm(m.momentum), 0.0);
    EXPECT_EQ(m.energy, 0.0);
}

TEST(Moments, UniformOnTorus)
{
    auto g = make_grid(MomentumGrid::torus(3, 16));
    Distribution W(g, 1.0, Statistics::Boltzmann);
    const auto m = moments(W, DispersionModel::lattice(3));
    EXPECT_NEAR(m.mass, 1.0, 1e-14);
    EXPECT_EQ(norm(m.momentum), 0.0);
    EXPECT_NEAR(m.energy, 3.0, 1e-13);
}

TEST(Moments, ShiftedGaussianOnBox)
{
    const auto model = DispersionModel::continuum(3);
    auto g = make_grid(MomentumGrid::box(3, 48, 8.0));
    const Vec u{0.5, -0.3, 0.2};
    std::vector<double> v(g->size());
    for (std::size_t i = 0; i < g->size(); ++i) v[i] = std::exp(-0.5 * norm2(g->node(i) - u));
    const auto m = moments(*g, model, v);
    const double z = std::pow(two_pi, 1.5);
    EXPECT_NEAR(m.mass / z, 1.0, 1e-7);
    for (int j = 0; j < 3; ++j) EXPECT_NEAR(m.momentum[j] / z, u[j], 1e-7);
    EXPECT_NEAR(m.energy / z, 0.5 * norm2(u) + 1.5, 1e-7);
}

TEST(Moments, SymmetrizedHasZeroMomentum)
{
    std::mt19937_64 rng(9);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (const auto& base : {MomentumGrid::torus(3, 10), MomentumGrid::torus(3, 9), MomentumGrid::box(3, 8, 5.0)}) {
        auto g = make_grid(base);
        std::vector<double> v(g->size());
        for (double& x : v) x = u(rng);
        std::vector<double> s(g->size());
        for (std::size_t i = 0; i < g->size(); ++i) s[i] = 0.5 * (v[i] + v[g->mirror_index(i)]);
        const auto m = moments(*g, DispersionModel::continuum(3), s);
        for (int j = 0; j < 3; ++j) EXPECT_EQ(m.momentum[j], 0.0);
    }
}

// Density of states of the lattice band from a histogram of omega over a
// 128^3 reference grid.
static double histogram_dos(double E, double bin)
{
    const std::size_t n = 128;
    std::vector<double> c(n);
    for (std::size_t m = 0; m < n; ++m) c[m] = 1.0 - std::cos(-pi + two_pi * static_cast<double>(m) / n);
    std::size_t hits = 0;
    for (std::size_t a = 0; a < n; ++a)
        for (std::size_t b = 0; b < n; ++b)
            for (std::size_t e = 0; e < n; ++e)
                if (std::abs(c[a] + c[b] + c[e] - E) < 0.5 * bin) ++hits;
    return static_cast<double>(hits) / (static_cast<double>(n * n * n) * bin);
}

TEST(EnergyShell, DensityOfStatesAtBandCenter)
{
    const auto model = DispersionModel::lattice(3);
    const auto g = MomentumGrid::torus(3, 32);
    const auto sw = energy_shell(g, model, 3.0, 0.1);
    const double dos = histogram_dos(3.0, 0.1);
    EXPECT_NEAR(sw.total() / dos, 1.0, 0.03);
    for (double s : sw.s) EXPECT_GE(s, 0.0);
}

TEST(EnergyShell, EmptyOutsideBand)
{
    const auto model = DispersionModel::lattice(3);
    const auto g = MomentumGrid::torus(3, 12);
    EXPECT_THROW(energy_shell(g, model, 6.0 + 6.5 * 0.05, 0.05), EmptyShell);
    EXPECT_THROW(energy_shell(g, model, -0.5, 0.05), EmptyShell);
    EXPECT_THROW(energy_shell(g, model, 3.0, 0.0), DomainError);
}

// Gaussian smearing is second order: S(2 eta) - S(eta) ~ 4 (S(eta) - S(eta/2)).
TEST(EnergyShell, SmearingIsSecondOrder)
{
    const auto model = DispersionModel::lattice(3);
    const auto g = MomentumGrid::torus(3, 96);
    const double eta = 0.1;
    const double s1 = energy_shell(g, model, 3.0, eta / 2).total();
    const double s2 = energy_shell(g, model, 3.0, eta).total();
    const double s4 = energy_shell(g, model, 3.0, 2 * eta).total();
    const double ratio = (s4 - s2) / (s2 - s1);
    EXPECT_NEAR(ratio, 4.0, 1.0);
}

TEST(EnergyShell, PartitionOfUnity)
{
    const auto model = DispersionModel::lattice(3);
    const auto g = MomentumGrid::torus(3, 16);
    const double eta = 0.15, dE = 0.05;
    double total = 0.0;
    for (double E = -6 * eta; E <= 6.0 + 6 * eta; E += dE) {
        const auto sw = energy_shell(g, model, E, eta);
        total += sw.total() * dE;
    }
    EXPECT_NEAR(total, 1.0, 1e-3);
}

TEST(EnergyShell, AutoEtaIsPositiveAndShrinksWithGrid)
{
    const auto model = DispersionModel::lattice(3);
    const double e16 = auto_eta(MomentumGrid::torus(3, 16), model, 3.0);
    const double e32 = auto_eta(MomentumGrid::torus(3, 32), model, 3.0);
    EXPECT_GT(e16, 0.0);
    EXPECT_LT(e32, e16);
}

TEST(Distribution, AdmissibilityChecks)
{
    auto g = make_grid(MomentumGrid::torus(1, 4));
    EXPECT_NO_THROW(check_admissible(Distribution(g, {0, 0.5, 1, 0.2}, Statistics::Fermion)));
    EXPECT_THROW(check_admissible(Distribution(g, {0, 0.5, 1.1, 0.2}, Statistics::Fermion)), InvariantViolation);
    EXPECT_NO_THROW(check_admissible(Distribution(g, {0, 0.5, 1.1, 0.2}, Statistics::Boson)));
    EXPECT_THROW(check_admissible(Distribution(g, {0, -0.5, 0.1, 0.2}, Statistics::Boltzmann)), InvariantViolation);
}

TEST(Io, CsvRoundTripIsExact)
{
    const auto model = DispersionModel::continuum(3);
    auto g = make_grid(MomentumGrid::box(3, 6, 6.0));
    std::vector<double> v(g->size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::exp(-0.5 * norm2(g->node(i))) / 3.0;
    Distribution W(g, v, Statistics::Fermion);
    const auto path = std::filesystem::temp_directory_path() / "qkin_grid_rt.csv";
    io::write_csv(path.string(), W);
    const auto R = io::read_distribution_csv(path.string(), model, Statistics::Fermion);
    EXPECT_TRUE(R.grid->same_as(*g));
    EXPECT_EQ(R.values, W.values);
    std::filesystem::remove(path);
}

TEST(Io, BinaryRoundTripIsExact)
{
    auto g = make_grid(MomentumGrid::torus(2, 8));
    SpatialGrid s = SpatialGrid::cube(2, 4, 10.0);
    WignerField F(s, g, Statistics::Boson);
    for (std::size_t i = 0; i < F.values.size(); ++i) F.values[i] = 0.1 * static_cast<double>(i % 17) + 1e-3;
    const auto path = std::filesystem::temp_directory_path() / "qkin_field_rt.bin";
    io::write_binary(path.string(), F);
    const auto R = io::read_binary_wigner(path.string());
    EXPECT_EQ(R.values, F.values);
    EXPECT_EQ(R.space.cells, F.space.cells);
    EXPECT_EQ(R.space.cell_size, F.space.cell_size);
    EXPECT_EQ(R.stats, Statistics::Boson);

    Distribution W(g, std::vector<double>(F.values.begin(), F.values.begin() + 64), Statistics::Fermion);
    io::write_binary(path.string(), W);
    const auto D = io::read_binary_distribution(path.string());
    EXPECT_EQ(D.values, W.values);
    std::filesystem::remove(path);
}

TEST(Io, WignerCsvHasPositionColumns)
{
    auto g = make_grid(MomentumGrid::torus(1, 4));
    WignerField F(SpatialGrid::cube(1, 3, 3.0), g, Statistics::Boltzmann);
    const auto path = std::filesystem::temp_directory_path() / "qkin_field.csv";
    io::write_csv(path.string(), F);
    const auto t = io::read_csv(path.string());
    EXPECT_EQ(t.header, (std::vector<std::string>{"k1", "r1", "W"}));
    EXPECT_EQ(t.rows.size(), 12u);
    EXPECT_DOUBLE_EQ(t.rows[4][1], 1.5);
    std::filesystem::remove(path);
}
