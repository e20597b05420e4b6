#ifndef QKIN_QUASIFREE_HPP
#define QKIN_QUASIFREE_HPP

#include <complex>

#include <Eigen/Dense>

#include "grids.hpp"

namespace qkin {

using cplx = std::complex<double>;

/// Two-point matrix C_ij = <a(k_i)* a(k_j)> of a quasifree state.
struct CorrelationMatrix {
    Eigen::MatrixXcd C;
    Statistics stats = Statistics::Fermion;

    std::size_t size() const { return static_cast<std::size_t>(C.rows()); }
};

/// Checks Hermiticity, positivity and (fermions) the upper bound 1 on the
/// spectrum, each up to a relative tolerance.
inline void validate(const CorrelationMatrix& cm, double tol = 1e-10)
{
    if (cm.C.rows() != cm.C.cols()) throw ContractViolation("correlation matrix must be square");
    if (cm.stats == Statistics::Boltzmann) throw ContractViolation("quasifree moments need boson or fermion statistics");
    if (cm.C.size() == 0) return;
    const double scale = std::max(1.0, cm.C.cwiseAbs().maxCoeff());
    if ((cm.C - cm.C.adjoint()).cwiseAbs().maxCoeff() > tol * scale)
        throw InvariantViolation("correlation matrix is not Hermitian");
    const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXcd> es(0.5 * (cm.C + cm.C.adjoint()), Eigen::EigenvaluesOnly);
    if (es.eigenvalues().minCoeff() < -tol * scale)
        throw InvariantViolation("correlation matrix is not positive semidefinite");
    if (cm.stats == Statistics::Fermion && es.eigenvalues().maxCoeff() > 1.0 + tol)
        throw InvariantViolation("fermionic correlation matrix has an eigenvalue above 1");
}

inline constexpr std::size_t permanent_max_size = 12;

/// Permanent by Ryser's inclusion-exclusion formula with Gray-code subset
/// updates, O(2^m m).
inline cplx permanent(const Eigen::MatrixXcd& A)
{
    const auto m = static_cast<std::size_t>(A.rows());
    if (A.rows() != A.cols()) throw ContractViolation("permanent of a non-square matrix");
    if (m > permanent_max_size)
        throw SizeError("permanent limited to m <= " + std::to_string(permanent_max_size) + ", got " + std::to_string(m));
    if (m == 0) return {1.0, 0.0};
    std::vector<cplx> rowsum(m, {0.0, 0.0});
    cplx total{0.0, 0.0};
    std::uint32_t gray = 0;
    for (std::uint32_t s = 1; s < (1u << m); ++s) {
        const std::uint32_t next = s ^ (s >> 1);
        const std::uint32_t flip = next ^ gray;
        const int col = std::countr_zero(flip);
        const double sign = (next & flip) ? 1.0 : -1.0;
        for (std::size_t i = 0; i < m; ++i) rowsum[i] += sign * A(static_cast<Eigen::Index>(i), col);
        gray = next;
        cplx prod{1.0, 0.0};
        for (std::size_t i = 0; i < m; ++i) prod *= rowsum[i];
        const int bits = std::popcount(gray);
        total += ((m - bits) % 2 == 0 ? 1.0 : -1.0) * prod;
    }
    return total;
}

inline cplx determinant(const Eigen::MatrixXcd& A)
{
    if (A.rows() != A.cols()) throw ContractViolation("determinant of a non-square matrix");
    if (A.rows() == 0) return {1.0, 0.0};
    return A.partialPivLu().determinant();
}

/// The 2m-point moment <a(k_1)*...a(k_m)* a(k'_m)...a(k'_1)> of a quasifree
/// state: permanent for bosons, determinant for fermions.
inline cplx quasifree_moment(const CorrelationMatrix& cm)
{
    validate(cm);
    return cm.stats == Statistics::Boson ? permanent(cm.C) : determinant(cm.C);
}

// ---------------------------------------------------------------------------
// Equilibrium distributions.

/// Occupation 1/(e^x - theta) evaluated without overflow; theta = 0 gives
/// the Maxwell-Boltzmann factor e^{-x}.
inline double occupation(double x, Statistics stats)
{
    switch (stats) {
    case Statistics::Fermion:
        if (x > 0.0) {
            const double e = std::exp(-x);
            return e / (1.0 + e);
        }
        return 1.0 / (1.0 + std::exp(x));
    case Statistics::Boson: return 1.0 / std::expm1(x);
    case Statistics::Boltzmann: break;
    }
    return std::exp(-x);
}

/// W(k) = 1/(e^{(omega(k) - u.k - mu)/T} - theta). The drift u is only
/// meaningful for the continuum, where it yields the Galilean-boosted
/// equilibrium.
inline Distribution thermal_distribution(const DispersionModel& model, GridPtr grid, double T, double mu, Statistics stats,
                                         const Vec& drift = {0.0, 0.0, 0.0})
{
    if (!(T > 0.0)) throw DomainError("temperature must be positive");
    if (stats == Statistics::Boson) {
        // minimum over k of omega - u.k
        const double floor = model.on_torus() ? model.band_minimum() - (norm(drift) > 0 ? INFINITY : 0.0)
                                              : -0.5 * norm2(drift);
        if (!(mu < floor))
            throw CondensationError("bosonic chemical potential " + std::to_string(mu)
                                    + " is not below the band minimum " + std::to_string(floor));
    }
    std::vector<double> v(grid->size());
    for (std::size_t i = 0; i < grid->size(); ++i) {
        const Vec& k = grid->node(i);
        v[i] = occupation((model.omega(k) - dot(drift, k) - mu) / T, stats);
    }
    return Distribution(std::move(grid), std::move(v), stats);
}

struct ThermalParameters {
    double T = 1.0;
    double mu = 0.0;
    Vec drift{0.0, 0.0, 0.0};
    int iterations = 0;
    double residual = 0.0;
};

/// Finds (T, mu, u) such that the thermal distribution on the grid has the
/// given mass, momentum and energy. Newton iteration in (log T, mu, u) with
/// backtracking; the drift is held at zero on the torus, where momentum is
/// not a conserved quantity.
inline ThermalParameters match_thermal(const DispersionModel& model, GridPtr grid, Statistics stats, const Moments& target,
                                       ThermalParameters guess = {}, double tol = 1e-13, int max_iter = 200)
{
    const int d = model.dim();
    const bool with_drift = !model.on_torus();
    const int nu = 2 + (with_drift ? d : 0);
    const auto residual_of = [&](const ThermalParameters& p, Eigen::VectorXd& r, Eigen::MatrixXd* J) {
        const auto W = thermal_distribution(model, grid, p.T, p.mu, stats, p.drift);
        const auto m = moments(W, model);
        r.resize(nu);
        const double ms = std::max(std::abs(target.mass), 1e-300);
        r(0) = (m.mass - target.mass) / ms;
        r(1) = (m.energy - target.energy) / ms;
        for (int a = 0; a < (with_drift ? d : 0); ++a) r(2 + a) = (m.momentum[a] - target.momentum[a]) / ms;
        if (!J) return;
        // dW/dparam = W(1+theta W) * dx, x = (omega - u.k - mu)/T
        J->setZero(nu, nu);
        const double th = theta_of(stats);
        for (std::size_t i = 0; i < grid->size(); ++i) {
            const Vec& k = grid->node(i);
            const double w = W.values[i];
            const double g = grid->weight(i) * w * (1.0 + th * w);
            const double x = (model.omega(k) - dot(p.drift, k) - p.mu) / p.T;
            std::vector<double> dp(nu);
            dp[0] = g * x;        // d/dlogT
            dp[1] = g / p.T;      // d/dmu
            for (int a = 0; a < (with_drift ? d : 0); ++a) dp[2 + a] = g * k[a] / p.T;
            const double om = model.omega(k);
            for (int c = 0; c < nu; ++c) {
                (*J)(0, c) += dp[c];
                (*J)(1, c) += om * dp[c];
                for (int a = 0; a < (with_drift ? d : 0); ++a) (*J)(2 + a, c) += k[a] * dp[c];
            }
        }
        *J /= std::max(std::abs(target.mass), 1e-300);
    };
    ThermalParameters p = guess;
    Eigen::VectorXd r;
    Eigen::MatrixXd J;
    residual_of(p, r, &J);
    for (int it = 0; it < max_iter; ++it) {
        p.iterations = it;
        p.residual = r.norm();
        if (p.residual < tol) return p;
        const Eigen::VectorXd step = J.colPivHouseholderQr().solve(-r);
        double lambda = 1.0;
        bool accepted = false;
        for (int bt = 0; bt < 40; ++bt) {
            ThermalParameters q = p;
            q.T = p.T * std::exp(lambda * step(0));
            q.mu = p.mu + lambda * step(1);
            for (int a = 0; a < (with_drift ? d : 0); ++a) q.drift[a] = p.drift[a] + lambda * step(2 + a);
            Eigen::VectorXd rq;
            try {
                residual_of(q, rq, nullptr);
            } catch (const CondensationError&) {
                lambda *= 0.5;
                continue;
            }
            if (rq.allFinite() && rq.norm() < (1.0 - 1e-4 * lambda) * p.residual) {
                p = q;
                accepted = true;
                break;
            }
            lambda *= 0.5;
        }
        if (!accepted) break;
        residual_of(p, r, &J);
    }
    p.residual = r.norm();
    if (p.residual > std::sqrt(tol))
        throw NumericalFault("thermal matching did not converge (residual " + std::to_string(p.residual) + ")");
    return p;
}

} // namespace qkin

#endif // QKIN_QUASIFREE_HPP
