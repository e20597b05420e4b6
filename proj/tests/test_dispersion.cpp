#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "qkin/dispersion.hpp"

using namespace qkin;

TEST(Dispersion, LatticeBandEdges)
{
    const auto m = DispersionModel::lattice(3);
    EXPECT_EQ(m.omega({0, 0, 0}), 0.0);
    EXPECT_NEAR(m.omega({pi, pi, pi}), 6.0, 1e-15);
}

TEST(Dispersion, ContinuumValue)
{
    const auto m = DispersionModel::continuum(3);
    EXPECT_DOUBLE_EQ(m.omega({1, 2, 2}), 4.5);
    const Vec k{0.3, -1.2, 2.5};
    EXPECT_EQ(m.group_velocity(k), k);
}

TEST(Dispersion, LatticeVelocity)
{
    const auto m = DispersionModel::lattice(3);
    const Vec v = m.group_velocity({pi / 2, 0, 0});
    EXPECT_NEAR(v[0], 1.0, 1e-15);
    EXPECT_EQ(v[1], 0.0);
    EXPECT_EQ(v[2], 0.0);
}

TEST(Dispersion, ZeroVelocityAtOrigin)
{
    for (const auto& m : {DispersionModel::lattice(3), DispersionModel::continuum(3), DispersionModel::optical(0.5, 3)}) {
        const Vec v = m.group_velocity({0, 0, 0});
        EXPECT_EQ(norm(v), 0.0) << to_string(m.kind());
    }
}

TEST(Dispersion, AcousticOriginIsSingular)
{
    const auto m = DispersionModel::acoustic(3);
    EXPECT_THROW(m.group_velocity({0, 0, 0}), DomainError);
    EXPECT_NEAR(m.omega({1e-4, 0, 0}), 1e-4, 1e-11);
}

TEST(Dispersion, OpticalGap)
{
    const auto m = DispersionModel::optical(0.7, 3);
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> u(-pi, pi);
    for (int s = 0; s < 1000; ++s) EXPECT_GE(m.omega({u(rng), u(rng), u(rng)}), 0.7);
}

TEST(Dispersion, ContinuumBoxRejectsOutside)
{
    const auto m = DispersionModel::continuum(3, 6.0);
    EXPECT_THROW(m.omega({6.5, 0, 0}), DomainError);
    EXPECT_NO_THROW(m.omega({6.0, 0, 0}));
}

TEST(Dispersion, TorusReduction)
{
    const auto m = DispersionModel::lattice(2);
    EXPECT_NEAR(m.omega({0.4 + 2 * two_pi, -1.0}), m.omega({0.4, -1.0}), 1e-13);
}

TEST(Dispersion, KindRoundTrip)
{
    for (auto k : {DispersionKind::LatticeNN, DispersionKind::ContinuumQuadratic, DispersionKind::PhononAcoustic,
                   DispersionKind::PhononOptical})
        EXPECT_EQ(dispersion_kind_from_string(to_string(k)), k);
    EXPECT_THROW(dispersion_kind_from_string("graphene"), ConfigError);
}

class DispersionProperty : public ::testing::TestWithParam<int> {
protected:
    static std::vector<DispersionModel> models(int d)
    {
        return {DispersionModel::lattice(d), DispersionModel::continuum(d), DispersionModel::acoustic(d),
                DispersionModel::optical(0.8, d)};
    }
};

TEST_P(DispersionProperty, EvenOmegaOddVelocity)
{
    const int d = GetParam();
    std::mt19937_64 rng(11 + d);
    std::uniform_real_distribution<double> u(-pi, pi);
    for (const auto& m : models(d)) {
        for (int s = 0; s < 10000; ++s) {
            Vec k{0, 0, 0};
            for (int j = 0; j < d; ++j) k[j] = u(rng);
            EXPECT_EQ(m.omega(k), m.omega(-k));
            const Vec v = m.group_velocity(k), w = m.group_velocity(-k);
            for (int j = 0; j < 3; ++j) ASSERT_EQ(v[j], -w[j]);
        }
    }
}

TEST_P(DispersionProperty, VelocityMatchesCentralDifference)
{
    const int d = GetParam();
    std::mt19937_64 rng(5 + d);
    std::uniform_real_distribution<double> u(-3.0, 3.0);
    for (const auto& m : models(d)) {
        // error / h^2 must stay bounded when h shrinks
        double worst[2] = {0, 0};
        const double hs[2] = {1e-2, 5e-3};
        for (int s = 0; s < 500; ++s) {
            Vec k{0, 0, 0};
            for (int j = 0; j < d; ++j) k[j] = u(rng);
            if (norm(k) < 0.3) continue;
            const Vec v = m.group_velocity(k);
            for (int q = 0; q < 2; ++q) {
                for (int j = 0; j < d; ++j) {
                    Vec kp = k, km = k;
                    kp[j] += hs[q];
                    km[j] -= hs[q];
                    const double fd = (m.omega(kp) - m.omega(km)) / (2 * hs[q]);
                    worst[q] = std::max(worst[q], std::abs(fd - v[j]) / (hs[q] * hs[q]));
                }
            }
        }
        EXPECT_LT(worst[0], 10.0) << to_string(m.kind());
        EXPECT_LT(worst[1], 10.0) << to_string(m.kind());
    }
}

INSTANTIATE_TEST_SUITE_P(Dims, DispersionProperty, ::testing::Values(1, 2, 3));

TEST(PropagatorDecay, UnitAmplitudeAtZero)
{
    const auto r = propagator_decay(DispersionModel::lattice(3), 20.0, 101);
    EXPECT_NEAR(r.amplitude[0], 1.0, 1e-14);
    EXPECT_EQ(r.running_integral[0], 0.0);
    EXPECT_TRUE(std::is_sorted(r.running_integral.begin(), r.running_integral.end()));
}

// In one dimension the lattice amplitude is |J0(t)|.
TEST(PropagatorDecay, OneDimensionalBessel)
{
    const auto r = propagator_decay(DispersionModel::lattice(1), 100.0, 1001);
    for (std::size_t s = 0; s < r.t.size(); ++s)
        ASSERT_NEAR(r.amplitude[s], std::abs(std::cyl_bessel_j(0.0, r.t[s])), 1e-10) << r.t[s];
}

TEST(PropagatorDecay, Factorizes)
{
    const auto a1 = propagator_decay(DispersionModel::lattice(1), 60.0, 301, 128);
    const auto a2 = propagator_decay(DispersionModel::lattice(2), 60.0, 301, 128);
    const auto a3 = propagator_decay(DispersionModel::lattice(3), 60.0, 301, 128);
    for (std::size_t s = 0; s < a1.t.size(); ++s) {
        ASSERT_NEAR(a2.amplitude[s], std::pow(a1.amplitude[s], 2), 1e-8);
        ASSERT_NEAR(a3.amplitude[s], std::pow(a1.amplitude[s], 3), 1e-8);
    }
}

TEST(PropagatorDecay, TailExponent)
{
    for (int d : {1, 2, 3}) {
        const auto r = propagator_decay(DispersionModel::lattice(d), 200.0, 2001);
        EXPECT_NEAR(r.exponent, 0.5 * d, 0.1) << "d=" << d;
        EXPECT_FALSE(r.fit_unreliable);
        EXPECT_TRUE(r.fit_on_peaks);
    }
}

TEST(PropagatorDecay, ShortWindowFlagged)
{
    const auto r = propagator_decay(DispersionModel::lattice(1), 5.0, 51);
    EXPECT_TRUE(r.fit_unreliable);
}

TEST(PropagatorDecay, OpticalBandDecays)
{
    const auto r = propagator_decay(DispersionModel::optical(1.0, 1), 200.0, 2001);
    EXPECT_GT(r.exponent, 0.3);
}

TEST(PropagatorDecay, RejectsBadInput)
{
    EXPECT_THROW(propagator_decay(DispersionModel::lattice(1), 0.0, 10), DomainError);
    EXPECT_THROW(propagator_decay(DispersionModel::continuum(1), 10.0, 10), DomainError);
}
