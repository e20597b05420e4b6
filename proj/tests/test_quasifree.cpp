#include <gtest/gtest.h>

#include <map>
#include <random>

#include "qkin/quasifree.hpp"

using namespace qkin;

namespace {

Eigen::MatrixXcd random_unitary(int n, std::mt19937_64& rng)
{
    std::normal_distribution<double> g;
    Eigen::MatrixXcd A(n, n);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) A(i, j) = cplx(g(rng), g(rng));
    return Eigen::HouseholderQR<Eigen::MatrixXcd>(A).householderQ();
}

// Leibniz sum over all permutations, with or without the sign.
cplx leibniz(const Eigen::MatrixXcd& A, bool signed_sum)
{
    const int m = static_cast<int>(A.rows());
    std::vector<int> p(m);
    std::iota(p.begin(), p.end(), 0);
    cplx total = 0.0;
    do {
        cplx prod = 1.0;
        for (int i = 0; i < m; ++i) prod *= A(i, p[i]);
        int inversions = 0;
        for (int i = 0; i < m; ++i)
            for (int j = i + 1; j < m; ++j) inversions += p[i] > p[j];
        total += (signed_sum && inversions % 2 ? -1.0 : 1.0) * prod;
    } while (std::next_permutation(p.begin(), p.end()));
    return total;
}

// Fock-space oracle. Modes b_l carry independent occupations n_l; the
// observed modes are a_j = sum_l V_jl b_l, so <a_i* a_j> = (conj(V) N V^T)_ij.
// A state is a map from occupation tuples to amplitudes.
using Occ = std::vector<int>;
using State = std::map<Occ, cplx>;

State annihilate(const State& s, const Eigen::MatrixXcd& V, int j, bool fermion)
{
    State out;
    const int M = static_cast<int>(V.cols());
    for (const auto& [occ, amp] : s) {
        int parity = 0;
        for (int l = 0; l < M; ++l) {
            if (occ[l] > 0) {
                Occ o = occ;
                o[l] -= 1;
                double f = fermion ? ((parity % 2) ? -1.0 : 1.0) : std::sqrt(static_cast<double>(occ[l]));
                out[o] += V(j, l) * f * amp;
            }
            parity += occ[l];
        }
    }
    return out;
}

cplx fock_moment(const Eigen::MatrixXcd& V, const std::vector<double>& n, const std::vector<int>& primed,
                 const std::vector<int>& unprimed, bool fermion)
{
    const int M = static_cast<int>(V.cols());
    const int cutoff = fermion ? 1 : 45;
    cplx total = 0.0;
    Occ occ(M, 0);
    // enumerate basis states with their thermal product probabilities
    std::function<void(int, double)> rec = [&](int l, double p) {
        if (l == M) {
            State s{{occ, cplx(1.0, 0.0)}};
            State L = s, R = s;
            // <s| a*_{k1}..a*_{km} a_{k'm}..a_{k'1} |s> = <a_{km}..a_{k1} s, a_{k'm}..a_{k'1} s>
            for (int j : primed) L = annihilate(L, V, j, fermion);
            for (int j : unprimed) R = annihilate(R, V, j, fermion);
            cplx ip = 0.0;
            for (const auto& [o, a] : L) {
                const auto it = R.find(o);
                if (it != R.end()) ip += std::conj(a) * it->second;
            }
            total += p * ip;
            return;
        }
        for (int k = 0; k <= cutoff; ++k) {
            double pk;
            if (fermion) pk = k ? n[l] : 1.0 - n[l];
            else pk = std::pow(n[l] / (1.0 + n[l]), k) / (1.0 + n[l]);
            occ[l] = k;
            rec(l + 1, p * pk);
        }
        occ[l] = 0;
    };
    rec(0, 1.0);
    return total;
}

} // namespace

TEST(Permanent, SingleMode)
{
    Eigen::MatrixXcd C(1, 1);
    C(0, 0) = 0.37;
    EXPECT_NEAR(std::abs(quasifree_moment({C, Statistics::Boson}) - 0.37), 0.0, 1e-15);
    EXPECT_NEAR(std::abs(quasifree_moment({C, Statistics::Fermion}) - 0.37), 0.0, 1e-15);
}

TEST(Determinant, TwoByTwo)
{
    const double a = 0.6, c = 0.3;
    const cplx b(0.1, -0.2);
    Eigen::MatrixXcd C(2, 2);
    C << a, b, std::conj(b), c;
    EXPECT_NEAR(std::abs(quasifree_moment({C, Statistics::Fermion}) - (a * c - std::norm(b))), 0.0, 1e-15);
    EXPECT_NEAR(std::abs(quasifree_moment({C, Statistics::Boson}) - (a * c + std::norm(b))), 0.0, 1e-15);
}

TEST(Permanent, MatchesLeibnizUpToEight)
{
    std::mt19937_64 rng(4);
    std::normal_distribution<double> g;
    for (int m = 1; m <= 8; ++m) {
        Eigen::MatrixXcd A(m, m);
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < m; ++j) A(i, j) = cplx(g(rng), g(rng));
        const cplx ref = leibniz(A, false);
        EXPECT_LT(std::abs(permanent(A) - ref), 1e-11 * (1.0 + std::abs(ref))) << m;
        const cplx dref = leibniz(A, true);
        EXPECT_LT(std::abs(determinant(A) - dref), 1e-11 * (1.0 + std::abs(dref))) << m;
    }
}

TEST(Permanent, SizeCap)
{
    Eigen::MatrixXcd A = Eigen::MatrixXcd::Identity(13, 13);
    EXPECT_THROW(permanent(A), SizeError);
    Eigen::MatrixXcd B = Eigen::MatrixXcd::Identity(12, 12);
    EXPECT_NEAR(std::abs(permanent(B) - 1.0), 0.0, 1e-15);
}

TEST(Quasifree, DiagonalAgreesBetweenStatistics)
{
    Eigen::MatrixXcd C = Eigen::MatrixXcd::Zero(5, 5);
    cplx prod = 1.0;
    for (int i = 0; i < 5; ++i) {
        C(i, i) = 0.1 + 0.15 * i;
        prod *= C(i, i);
    }
    EXPECT_NEAR(std::abs(quasifree_moment({C, Statistics::Boson}) - prod), 0.0, 1e-15);
    EXPECT_NEAR(std::abs(quasifree_moment({C, Statistics::Fermion}) - prod), 0.0, 1e-15);
}

TEST(Quasifree, BlockDiagonalFactorizes)
{
    std::mt19937_64 rng(8);
    for (auto st : {Statistics::Boson, Statistics::Fermion}) {
        const auto U1 = random_unitary(3, rng), U2 = random_unitary(2, rng);
        Eigen::VectorXd n1(3), n2(2);
        n1 << 0.2, 0.5, 0.9;
        n2 << 0.3, 0.7;
        Eigen::MatrixXcd C1 = U1 * n1.cast<cplx>().asDiagonal() * U1.adjoint();
        Eigen::MatrixXcd C2 = U2 * n2.cast<cplx>().asDiagonal() * U2.adjoint();
        Eigen::MatrixXcd C = Eigen::MatrixXcd::Zero(5, 5);
        C.topLeftCorner(3, 3) = C1;
        C.bottomRightCorner(2, 2) = C2;
        const cplx whole = quasifree_moment({C, st});
        const cplx parts = quasifree_moment({C1, st}) * quasifree_moment({C2, st});
        EXPECT_LT(std::abs(whole - parts), 1e-13);
    }
}

TEST(Quasifree, RejectsInvalidMatrices)
{
    Eigen::MatrixXcd C(2, 2);
    C << 0.5, cplx(0.1, 0.1), cplx(0.1, 0.1), 0.5; // not Hermitian
    EXPECT_THROW(quasifree_moment({C, Statistics::Fermion}), InvariantViolation);
    Eigen::MatrixXcd D = Eigen::MatrixXcd::Identity(2, 2) * 1.5;
    EXPECT_THROW(quasifree_moment({D, Statistics::Fermion}), InvariantViolation);
    EXPECT_NO_THROW(quasifree_moment({D, Statistics::Boson}));
    Eigen::MatrixXcd E = -Eigen::MatrixXcd::Identity(2, 2);
    EXPECT_THROW(quasifree_moment({E, Statistics::Boson}), InvariantViolation);
}

// Ordering convention <a(k_1)*..a(k_m)* a(k'_m)..a(k'_1)> = per/det[C(k_i, k'_j)],
// pinned against an explicit Fock-space computation.
TEST(Quasifree, MatchesFockSpaceForThreePoints)
{
    std::mt19937_64 rng(21);
    const int M = 3;
    for (bool fermion : {true, false}) {
        const auto V = random_unitary(M, rng);
        const std::vector<double> n = fermion ? std::vector<double>{0.15, 0.55, 0.8} : std::vector<double>{0.1, 0.25, 0.4};
        Eigen::MatrixXcd N = Eigen::MatrixXcd::Zero(M, M);
        for (int l = 0; l < M; ++l) N(l, l) = n[l];
        const Eigen::MatrixXcd Cfull = V.conjugate() * N * V.transpose();
        for (int m = 1; m <= 3; ++m) {
            std::vector<int> primed(m), unprimed(m);
            for (int q = 0; q < m; ++q) {
                primed[q] = (q + 1) % M;
                unprimed[q] = (2 * q) % M;
            }
            if (fermion && m == 3) unprimed = {2, 0, 1};
            Eigen::MatrixXcd C(m, m);
            for (int p = 0; p < m; ++p)
                for (int q = 0; q < m; ++q) C(p, q) = Cfull(primed[p], unprimed[q]);
            const cplx ref = fock_moment(V, n, primed, unprimed, fermion);
            const cplx got = fermion ? determinant(C) : permanent(C);
            EXPECT_LT(std::abs(got - ref), 1e-12) << (fermion ? "fermion" : "boson") << " m=" << m;
            // on the diagonal the two-point function itself
            if (m == 1) {
                EXPECT_LT(std::abs(ref - Cfull(primed[0], unprimed[0])), 1e-12);
            }
        }
    }
}

TEST(Thermal, FermiStepLimit)
{
    const auto model = DispersionModel::lattice(3);
    auto g = make_grid(MomentumGrid::torus(3, 10));
    const double mu = 2.9;
    const auto W = thermal_distribution(model, g, 1e-4, mu, Statistics::Fermion);
    for (std::size_t i = 0; i < g->size(); ++i) {
        const double w = model.omega(g->node(i));
        if (std::abs(w - mu) < 0.01) continue;
        EXPECT_NEAR(W.values[i], w < mu ? 1.0 : 0.0, 1e-12);
    }
}

TEST(Thermal, HalfAtFermiSurface)
{
    const auto model = DispersionModel::lattice(1);
    auto g = make_grid(MomentumGrid::torus(1, 4)); // nodes -pi, -pi/2, 0, pi/2
    const auto W = thermal_distribution(model, g, 0.7, 1.0, Statistics::Fermion);
    EXPECT_NEAR(W.values[1], 0.5, 1e-15);
    EXPECT_NEAR(W.values[3], 0.5, 1e-15);
}

TEST(Thermal, BoseMassConverges)
{
    const auto model = DispersionModel::lattice(3);
    auto g = make_grid(MomentumGrid::torus(3, 32));
    const auto W = thermal_distribution(model, g, 1.0, -1.0, Statistics::Boson);
    const double mass = moments(W, model).mass;
    // reference: 256 points per axis, exploiting the product structure of
    // the torus only through direct summation
    const std::size_t n = 256;
    std::vector<double> c(n);
    for (std::size_t m = 0; m < n; ++m) c[m] = 1.0 - std::cos(two_pi * static_cast<double>(m) / n);
    double ref = 0.0;
    for (std::size_t a = 0; a < n; ++a)
        for (std::size_t b = 0; b < n; ++b)
            for (std::size_t e = 0; e < n; ++e) ref += 1.0 / (std::exp(c[a] + c[b] + c[e] + 1.0) - 1.0);
    ref /= static_cast<double>(n * n * n);
    EXPECT_NEAR(mass, ref, 1e-10);
}

TEST(Thermal, BoseCondensationRejected)
{
    const auto model = DispersionModel::lattice(3);
    auto g = make_grid(MomentumGrid::torus(3, 4));
    EXPECT_THROW(thermal_distribution(model, g, 1.0, 0.0, Statistics::Boson), CondensationError);
    EXPECT_THROW(thermal_distribution(model, g, 1.0, 0.1, Statistics::Boson), CondensationError);
    EXPECT_NO_THROW(thermal_distribution(model, g, 1.0, 0.1, Statistics::Fermion));
}

TEST(Thermal, MatchRecoversParameters)
{
    const auto model = DispersionModel::continuum(3);
    auto g = make_grid(MomentumGrid::box(3, 14, 6.0));
    for (auto st : {Statistics::Fermion, Statistics::Boltzmann, Statistics::Boson}) {
        const double mu = st == Statistics::Boson ? -0.6 : 0.4;
        const Vec u{0.3, -0.1, 0.2};
        const auto W = thermal_distribution(model, g, 0.9, mu, st, u);
        const auto p = match_thermal(model, g, st, moments(W, model), {1.0, -0.5, {0, 0, 0}});
        EXPECT_NEAR(p.T, 0.9, 1e-9);
        EXPECT_NEAR(p.mu, mu, 1e-9);
        for (int a = 0; a < 3; ++a) EXPECT_NEAR(p.drift[a], u[a], 1e-9);
    }
}
