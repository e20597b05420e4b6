#ifndef QKIN_COLLISION_UU_HPP
#define QKIN_COLLISION_UU_HPP

#include <Eigen/Dense>

#include "grids.hpp"
#include "spectrum.hpp"

namespace qkin {

// ---------------------------------------------------------------------------
// Rate density and bracket.

/// Phi = |V(k1 - k3) + theta V(k2 - k3)|^2.
inline double collision_rate(const PairPotential& V, Statistics stats, const Vec& k1, const Vec& k2, const Vec& k3,
                             const Vec& k4, bool on_torus = false)
{
    (void)k4;
    const double a = V(k1 - k3, on_torus) + theta_of(stats) * V(k2 - k3, on_torus);
    return a * a;
}

struct GainLoss {
    double gain = 0.0;
    double loss = 0.0;
    double net() const { return gain - loss; }
};

/// W3 W4 (1 + theta W1)(1 + theta W2) and W1 W2 (1 + theta W3)(1 + theta W4).
inline GainLoss uu_bracket(double W1, double W2, double W3, double W4, double theta)
{
    return {W3 * W4 * (1.0 + theta * W1) * (1.0 + theta * W2), W1 * W2 * (1.0 + theta * W3) * (1.0 + theta * W4)};
}

// ---------------------------------------------------------------------------
// Sphere rule.

/// Gauss-Legendre in cos(theta) times a uniform azimuthal rule. Directions
/// s and s + size()/2 are antipodal.
struct SphereRule {
    std::vector<Vec> directions;
    std::vector<double> weights; ///< sum to 4 pi
    std::size_t n_theta = 0;
    std::size_t n_phi = 0;

    std::size_t size() const { return directions.size(); }
};

inline std::vector<std::pair<double, double>> gauss_legendre(std::size_t n)
{
    std::vector<std::pair<double, double>> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        double x = std::cos(pi * (static_cast<double>(i) + 0.75) / (static_cast<double>(n) + 0.5));
        double dp = 0.0;
        for (int it = 0; it < 100; ++it) {
            double p0 = 1.0, p1 = x;
            for (std::size_t k = 2; k <= n; ++k) {
                const double p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / static_cast<double>(k);
                p0 = p1;
                p1 = p2;
            }
            if (n == 1) p0 = 1.0;
            dp = static_cast<double>(n) * (x * p1 - p0) / (x * x - 1.0);
            const double dx = p1 / dp;
            x -= dx;
            if (std::abs(dx) < 1e-16) break;
        }
        out[i] = {x, 2.0 / ((1.0 - x * x) * dp * dp)};
    }
    return out;
}

/// n_s must be a multiple of 4 and at least 8. The number of polar nodes is
/// the largest even divisor of n_s not exceeding sqrt(n_s / 2) that leaves
/// an even azimuthal count.
inline SphereRule sphere_rule(std::size_t n_s)
{
    if (n_s < 8 || n_s % 4 != 0) throw DomainError("sphere rule size must be a multiple of 4 and at least 8");
    SphereRule r;
    for (std::size_t t = 2; t * t <= n_s / 2; t += 2)
        if (n_s % t == 0 && (n_s / t) % 2 == 0) r.n_theta = t;
    r.n_phi = n_s / r.n_theta;
    const auto gl = gauss_legendre(r.n_theta);
    // gauss_legendre returns nodes in decreasing order: the first half has cos > 0
    std::vector<Vec> upper, lower;
    std::vector<double> wu;
    for (std::size_t i = 0; i < r.n_theta / 2; ++i) {
        const double ct = gl[i].first, st = std::sqrt(1.0 - ct * ct);
        for (std::size_t j = 0; j < r.n_phi; ++j) {
            const double ph = two_pi * (static_cast<double>(j) + 0.5) / static_cast<double>(r.n_phi);
            const Vec d{st * std::cos(ph), st * std::sin(ph), ct};
            upper.push_back(d);
            lower.push_back(-d);
            wu.push_back(gl[i].second * two_pi / static_cast<double>(r.n_phi));
        }
    }
    r.directions = upper;
    r.directions.insert(r.directions.end(), lower.begin(), lower.end());
    r.weights = wu;
    r.weights.insert(r.weights.end(), wu.begin(), wu.end());
    return r;
}

// ---------------------------------------------------------------------------
// Off-grid evaluation of W on a box grid.

/// Evaluates a box-grid distribution at arbitrary momenta by tri-quadratic
/// interpolation of the log-fugacity z = ln(W / (1 + theta W)), which is
/// exact for thermal states. Where a stencil touches W = 0 (or W = 1 for
/// fermions) it falls back to trilinear interpolation of W. W vanishes
/// outside the box.
class LogFugacityInterpolant {
public:
    LogFugacityInterpolant(const MomentumGrid& grid, std::span<const double> W, Statistics stats)
        : n_(grid.points_per_axis()), inv_h_(1.0 / grid.spacing()), K_(grid.half_width()), theta_(theta_of(stats)),
          W_(W.begin(), W.end())
    {
        require(grid.kind() == GridKind::BoxUniform && grid.dim() == 3 && grid.is_product(),
                "log-fugacity interpolation needs a 3D box product grid");
        require(n_ >= 3, "log-fugacity interpolation needs at least 3 points per axis");
        require(W.size() == grid.size(), "interpolant: size mismatch");
        z_.resize(W.size());
        std::vector<char> finite(W.size());
        for (std::size_t i = 0; i < W.size(); ++i) {
            z_[i] = log_fugacity(W[i]);
            finite[i] = std::isfinite(z_[i]);
        }
        ok_.assign(W.size(), 0);
        for (std::size_t a = 1; a + 1 < n_; ++a)
            for (std::size_t b = 1; b + 1 < n_; ++b)
                for (std::size_t c = 1; c + 1 < n_; ++c) {
                    bool all = true;
                    for (int da = -1; da <= 1 && all; ++da)
                        for (int db = -1; db <= 1 && all; ++db)
                            for (int dc = -1; dc <= 1 && all; ++dc)
                                all = finite[index(a + da, b + db, c + dc)];
                    ok_[index(a, b, c)] = all;
                }
    }

    double log_fugacity(double w) const
    {
        if (!(w > 0.0)) return -INFINITY;
        if (theta_ < 0.0) return w >= 1.0 ? INFINITY : std::log(w / (1.0 - w));
        if (theta_ > 0.0) return -std::log1p(1.0 / w);
        return std::log(w);
    }

    double operator()(const Vec& p) const
    {
        if (!(std::abs(p[0]) <= K_ && std::abs(p[1]) <= K_ && std::abs(p[2]) <= K_)) return 0.0;
        double x[3];
        std::size_t m[3];
        for (int a = 0; a < 3; ++a) {
            x[a] = (p[a] + K_) * inv_h_ - 0.5;
            // x >= -0.5 inside the box, so truncation rounds to nearest
            const auto r = static_cast<std::ptrdiff_t>(x[a] + 0.5);
            m[a] = static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(r, 1, static_cast<std::ptrdiff_t>(n_) - 2));
        }
        const std::size_t centre = index(m[0], m[1], m[2]);
        if (ok_[centre]) {
            double l[3][3];
            for (int a = 0; a < 3; ++a) {
                const double t = x[a] - static_cast<double>(m[a]);
                l[a][0] = 0.5 * t * (t - 1.0);
                l[a][1] = 1.0 - t * t;
                l[a][2] = 0.5 * t * (t + 1.0);
            }
            const std::size_t s0 = n_ * n_, s1 = n_;
            const double* base = z_.data() + centre - s0 - s1 - 1;
            double z = 0.0;
            for (int a = 0; a < 3; ++a) {
                double za = 0.0;
                for (int b = 0; b < 3; ++b) {
                    const double* row = base + a * s0 + b * s1;
                    za += l[1][b] * (l[2][0] * row[0] + l[2][1] * row[1] + l[2][2] * row[2]);
                }
                z += l[0][a] * za;
            }
            if (theta_ < 0.0) return 1.0 / (1.0 + std::exp(-z));
            if (theta_ == 0.0) return std::exp(z);
            if (z < -1e-12) return 1.0 / std::expm1(-z);
        }
        return trilinear(x);
    }

private:
    std::size_t index(std::size_t a, std::size_t b, std::size_t c) const { return (a * n_ + b) * n_ + c; }

    double trilinear(const double* x) const
    {
        std::size_t i0[3];
        double f[3];
        for (int a = 0; a < 3; ++a) {
            const double xc = std::clamp(x[a], 0.0, static_cast<double>(n_ - 1));
            i0[a] = std::min(static_cast<std::size_t>(xc), n_ - 2);
            f[a] = xc - static_cast<double>(i0[a]);
        }
        double v = 0.0;
        for (int a = 0; a < 2; ++a)
            for (int b = 0; b < 2; ++b)
                for (int c = 0; c < 2; ++c)
                    v += (a ? f[0] : 1 - f[0]) * (b ? f[1] : 1 - f[1]) * (c ? f[2] : 1 - f[2])
                         * W_[index(i0[0] + a, i0[1] + b, i0[2] + c)];
        return v;
    }

    std::size_t n_;
    double inv_h_, K_, theta_;
    std::vector<double> W_, z_;
    std::vector<char> ok_;
};

// ---------------------------------------------------------------------------
// Quadrature and operator.

enum class UuQuadratureKind { SphereReduction, SmearedDelta };

struct UuQuadrature {
    UuQuadratureKind kind = UuQuadratureKind::SphereReduction;
    std::size_t n_s = 128; ///< sphere directions (continuum)
    double eta = 0.0;      ///< energy smearing (lattice)
    bool project = true;   ///< conservative projection of the result

    static UuQuadrature sphere(std::size_t n_s = 128, bool project = true)
    {
        return {UuQuadratureKind::SphereReduction, n_s, 0.0, project};
    }
    static UuQuadrature smeared(double eta, bool project = true)
    {
        return {UuQuadratureKind::SmearedDelta, 0, eta, project};
    }
};

/// One point (k3, k4) of the continuum collision manifold for given k1, k2,
/// with its quadrature weight (Jacobian |k1 - k2| / 4 included).
struct CollisionSample {
    Vec k3, k4;
    double weight = 0.0;
};

struct UuResult {
    std::vector<double> C;    ///< after projection when enabled
    std::vector<double> gain; ///< unprojected
    std::vector<double> loss; ///< unprojected
};

/// Subtracts rho * sum_a c_a phi_a from C so that sum_i w_i phi_a(k_i) C_i = 0
/// for every basis function, with rho = W (1 + theta W). The correction
/// vanishes where W = 0 or (fermions) W = 1. If rho cannot span the basis the
/// plain least-squares projection (rho = 1) is used instead.
inline void conservative_projection(const MomentumGrid& grid, const std::vector<std::vector<double>>& basis,
                                    std::span<const double> W, Statistics stats, std::vector<double>& C)
{
    const std::size_t nb = basis.size(), n = C.size();
    const double th = theta_of(stats);
    std::vector<double> rho(n);
    double rmax = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        rho[i] = W[i] * (1.0 + th * W[i]);
        rmax = std::max(rmax, rho[i]);
    }
    auto gram = [&](const std::vector<double>& r) {
        Eigen::MatrixXd G = Eigen::MatrixXd::Zero(nb, nb);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t a = 0; a < nb; ++a)
                for (std::size_t b = 0; b <= a; ++b) G(a, b) += grid.weight(i) * r[i] * basis[a][i] * basis[b][i];
        return Eigen::MatrixXd(G.selfadjointView<Eigen::Lower>());
    };
    Eigen::MatrixXd G = rmax > 0.0 ? gram(rho) : Eigen::MatrixXd::Zero(nb, nb);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(G);
    if (!(rmax > 0.0) || es.eigenvalues().minCoeff() <= 1e-12 * es.eigenvalues().maxCoeff()) {
        rho.assign(n, 1.0);
        G = gram(rho);
    }
    const auto solver = G.completeOrthogonalDecomposition();
    std::vector<double> terms(n);
    for (int pass = 0; pass < 2; ++pass) {
        Eigen::VectorXd rhs(nb);
        for (std::size_t a = 0; a < nb; ++a) {
            for (std::size_t i = 0; i < n; ++i) terms[i] = grid.weight(i) * basis[a][i] * C[i];
            rhs[a] = pairwise_sum(terms);
        }
        const Eigen::VectorXd c = solver.solve(rhs);
        for (std::size_t i = 0; i < n; ++i) {
            double s = 0.0;
            for (std::size_t a = 0; a < nb; ++a) s += c[a] * basis[a][i];
            C[i] -= rho[i] * s;
        }
    }
}

/// Uehling-Uhlenbeck collision operator
///   C(W)(k1) = int dk2 dk3 dk4 Phi delta(k1+k2-k3-k4) delta(w1+w2-w3-w4)
///              [W3 W4 (1+theta W1)(1+theta W2) - W1 W2 (1+theta W3)(1+theta W4)]
/// with Phi = |V(k1-k3) + theta V(k2-k3)|^2 and no further prefactor.
///
/// Continuum (3D box grid): k3, k4 = (k1+k2)/2 +- |k1-k2|/2 n with n on the
/// sphere rule, Jacobian |k1-k2|/4, W evaluated by LogFugacityInterpolant.
/// Lattice (torus product grid): k4 = k1+k2-k3 mod 2 pi is a grid node and
/// the energy delta is smeared (cut at 6 eta).
class UuOperator {
public:
    UuOperator(GridPtr grid, DispersionModel model, PairPotential V, Statistics stats, UuQuadrature q = {})
        : grid_(std::move(grid)), model_(model), V_(std::move(V)), stats_(stats), q_(q)
    {
        require(grid_ != nullptr, "UU operator needs a grid");
        if (q_.kind == UuQuadratureKind::SphereReduction) {
            if (model_.kind() != DispersionKind::ContinuumQuadratic)
                throw ContractViolation("sphere reduction needs the continuum quadratic dispersion");
            if (grid_->kind() != GridKind::BoxUniform || grid_->dim() != 3 || !grid_->is_product())
                throw ContractViolation("sphere reduction needs a 3D box product grid");
            sphere_ = sphere_rule(q_.n_s);
        } else {
            if (!model_.on_torus() || grid_->kind() != GridKind::TorusUniform || !grid_->is_product())
                throw ContractViolation("smeared-delta UU quadrature needs a torus product grid and a lattice dispersion");
            if (grid_->dim() != model_.dim()) throw ContractViolation("grid and dispersion dimensions differ");
            if (!(q_.eta > 0.0)) throw DomainError("smeared-delta UU quadrature needs eta > 0");
        }
        omega_ = node_energies(*grid_, model_);
        const std::size_t n = grid_->size();
        basis_.push_back(std::vector<double>(n, 1.0));
        double wmax = 0.0;
        for (double w : omega_) wmax = std::max(wmax, std::abs(w));
        if (!model_.on_torus()) {
            const double K = grid_->half_width();
            for (int a = 0; a < 3; ++a) {
                std::vector<double> b(n);
                for (std::size_t i = 0; i < n; ++i) b[i] = grid_->node(i)[a] / K;
                basis_.push_back(std::move(b));
            }
        }
        std::vector<double> e(n);
        for (std::size_t i = 0; i < n; ++i) e[i] = omega_[i] / (wmax > 0.0 ? wmax : 1.0);
        basis_.push_back(std::move(e));
    }

    const MomentumGrid& grid() const { return *grid_; }
    GridPtr grid_ptr() const { return grid_; }
    const DispersionModel& model() const { return model_; }
    const PairPotential& potential() const { return V_; }
    Statistics statistics() const { return stats_; }
    const UuQuadrature& quadrature() const { return q_; }
    const SphereRule& sphere() const { return sphere_; }

    /// Points of the collision manifold used for the pair (k1, k2).
    std::vector<CollisionSample> samples(const Vec& k1, const Vec& k2) const
    {
        require(q_.kind == UuQuadratureKind::SphereReduction, "samples() is defined for the sphere reduction");
        const Vec c = 0.5 * (k1 + k2);
        const double r = 0.5 * norm(k1 - k2);
        std::vector<CollisionSample> out;
        for (std::size_t s = 0; s < sphere_.size(); ++s) {
            const Vec d = r * sphere_.directions[s];
            out.push_back({c + d, c - d, sphere_.weights[s] * 0.5 * r});
        }
        return out;
    }

    UuResult evaluate(std::span<const double> W) const
    {
        if (W.size() != grid_->size())
            throw ContractViolation("UU apply: " + std::to_string(W.size()) + " values for a grid of "
                                    + std::to_string(grid_->size()));
        check_admissible(W, stats_, "UU apply");
        UuResult r;
        if (q_.kind == UuQuadratureKind::SphereReduction) sphere_apply(W, r);
        else lattice_apply(W, r);
        r.C.resize(W.size());
        for (std::size_t i = 0; i < W.size(); ++i) r.C[i] = r.gain[i] - r.loss[i];
        if (q_.project) conservative_projection(*grid_, basis_, W, stats_, r.C);
        return r;
    }

    std::vector<double> apply(std::span<const double> W) const { return evaluate(W).C; }

    UuResult evaluate(const Distribution& W) const
    {
        check_distribution(W);
        return evaluate(std::span<const double>(W.values));
    }

    void check_distribution(const Distribution& W) const
    {
        if (!W.grid || !W.grid->same_as(*grid_)) throw ContractViolation("distribution grid does not match the UU quadrature");
        if (W.stats != stats_) throw ContractViolation("distribution statistics do not match the UU operator");
    }

private:
    static constexpr std::size_t chunk_count = 64;

    void sphere_apply(std::span<const double> W, UuResult& r) const
    {
        const std::size_t n = W.size();
        const double th = theta_of(stats_);
        const LogFugacityInterpolant interp(*grid_, W, stats_);
        const std::size_t half = sphere_.size() / 2;
        // rows are split into a fixed number of chunks with roughly equal pair
        // counts; each chunk owns its accumulators so the sum order does not
        // depend on the number of workers
        const std::size_t chunks = std::min(chunk_count, n);
        std::vector<std::size_t> start(chunks + 1, n);
        {
            const double total = 0.5 * static_cast<double>(n) * static_cast<double>(n - 1);
            std::size_t c = 0;
            double acc = 0.0;
            start[0] = 0;
            for (std::size_t i = 0; i < n && c + 1 < chunks; ++i) {
                acc += static_cast<double>(n - 1 - i);
                if (acc >= total * static_cast<double>(c + 1) / static_cast<double>(chunks)) start[++c] = i + 1;
            }
            for (std::size_t k = c + 1; k <= chunks; ++k) start[k] = n;
        }
        std::vector<std::vector<double>> gain(chunks), loss(chunks);
        const bool trivial_potential = V_.is_constant() && (th < 0.0 || V_.amplitude() == 0.0);
        // Gaussian potential: |k1-k3|^2 = 2 r^2 (1 - u.n) and |k2-k3|^2 = 2 r^2 (1 + u.n)
        // with u the unit vector along k1 - k2, so one exponential serves both
        const bool gaussian = V_.kind() == Spectrum::Kind::Gaussian;
        const double inv_w2 = gaussian ? 1.0 / (V_.width() * V_.width()) : 0.0;
        parallel_for(chunks, [&](std::size_t c) {
            auto& g = gain[c];
            auto& l = loss[c];
            g.assign(n, 0.0);
            l.assign(n, 0.0);
            if (trivial_potential) return;
            for (std::size_t i = start[c]; i < start[c + 1]; ++i) {
                const Vec& k1 = grid_->node(i);
                const double W1 = W[i];
                double gi = 0.0, li = 0.0;
                for (std::size_t j = i + 1; j < n; ++j) {
                    const Vec& k2 = grid_->node(j);
                    const double W2 = W[j];
                    const Vec cm = 0.5 * (k1 + k2);
                    const double rr = 0.5 * norm(k1 - k2);
                    const double b12 = (1.0 + th * W1) * (1.0 + th * W2), w12 = W1 * W2;
                    const Vec u = rr > 0.0 ? (0.5 / rr) * (k1 - k2) : Vec{0.0, 0.0, 0.0};
                    const double gpre = gaussian ? V_.amplitude() * std::exp(-rr * rr * inv_w2) : 0.0;
                    double sg = 0.0, sl = 0.0;
                    for (std::size_t s = 0; s < half; ++s) {
                        const Vec d = rr * sphere_.directions[s];
                        const Vec k3 = cm + d, k4 = cm - d;
                        double A, B;
                        if (gaussian) {
                            const double e = std::exp(rr * rr * inv_w2 * dot(u, sphere_.directions[s]));
                            A = gpre * e;
                            B = gpre / e;
                        } else {
                            A = V_(k1 - k3, false);
                            B = V_(k2 - k3, false);
                        }
                        const double phi = (A + th * B) * (A + th * B) + (B + th * A) * (B + th * A);
                        if (phi == 0.0) continue;
                        const double W3 = interp(k3), W4 = interp(k4);
                        const double a = sphere_.weights[s] * phi;
                        sg += a * W3 * W4 * b12;
                        sl += a * w12 * (1.0 + th * W3) * (1.0 + th * W4);
                    }
                    const double jac = 0.5 * rr;
                    sg *= jac;
                    sl *= jac;
                    gi += grid_->weight(j) * sg;
                    li += grid_->weight(j) * sl;
                    g[j] += grid_->weight(i) * sg;
                    l[j] += grid_->weight(i) * sl;
                }
                g[i] += gi;
                l[i] += li;
            }
        });
        r.gain.assign(n, 0.0);
        r.loss.assign(n, 0.0);
        for (std::size_t c = 0; c < chunks; ++c)
            for (std::size_t i = 0; i < n; ++i) {
                r.gain[i] += gain[c][i];
                r.loss[i] += loss[c][i];
            }
    }

    void lattice_apply(std::span<const double> W, UuResult& r) const
    {
        const std::size_t n = W.size(), m = grid_->points_per_axis();
        const int d = grid_->dim();
        const double th = theta_of(stats_), cut = 6.0 * q_.eta;
        std::vector<std::array<std::size_t, 3>> ax(n);
        for (std::size_t i = 0; i < n; ++i) ax[i] = grid_->axis_indices(i);
        // V(k_a - k_b) depends only on the index difference mod m
        std::vector<double> vtab(n);
        const double h = grid_->spacing();
        for (std::size_t i = 0; i < n; ++i) {
            Vec q{0.0, 0.0, 0.0};
            for (int k = 0; k < d; ++k) q[k] = h * static_cast<double>(ax[i][k]);
            vtab[i] = V_(q, true);
        }
        auto vdiff = [&](std::size_t a, std::size_t b) {
            std::array<std::size_t, 3> t{0, 0, 0};
            for (int k = 0; k < d; ++k) t[k] = (ax[a][k] + m - ax[b][k]) % m;
            return vtab[grid_->flat_index(t)];
        };
        r.gain.assign(n, 0.0);
        r.loss.assign(n, 0.0);
        parallel_for(n, [&](std::size_t i) {
            double gi = 0.0, li = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
                const double e12 = omega_[i] + omega_[j];
                const double b12 = (1.0 + th * W[i]) * (1.0 + th * W[j]), w12 = W[i] * W[j];
                double sg = 0.0, sl = 0.0;
                for (std::size_t l = 0; l < n; ++l) {
                    std::array<std::size_t, 3> a4{0, 0, 0};
                    for (int k = 0; k < d; ++k) a4[k] = (ax[i][k] + ax[j][k] + m - ax[l][k]) % m;
                    const std::size_t q = grid_->flat_index(a4);
                    const double dw = e12 - omega_[l] - omega_[q];
                    if (std::abs(dw) > cut) continue;
                    const double A = vdiff(i, l) + th * vdiff(j, l);
                    const double a = grid_->weight(l) * A * A * smeared_delta(dw, q_.eta);
                    sg += a * W[l] * W[q] * b12;
                    sl += a * w12 * (1.0 + th * W[l]) * (1.0 + th * W[q]);
                }
                gi += grid_->weight(j) * sg;
                li += grid_->weight(j) * sl;
            }
            r.gain[i] = gi;
            r.loss[i] = li;
        });
    }

    GridPtr grid_;
    DispersionModel model_;
    PairPotential V_;
    Statistics stats_;
    UuQuadrature q_;
    SphereRule sphere_;
    std::vector<double> omega_;
    std::vector<std::vector<double>> basis_;
};

inline UuResult apply_uu(const Distribution& W, const UuOperator& op) { return op.evaluate(W); }

inline UuResult apply_uu(const Distribution& W, const DispersionModel& model, const PairPotential& V, UuQuadrature q = {})
{
    return UuOperator(W.grid, model, V, W.stats, q).evaluate(W);
}

// ---------------------------------------------------------------------------
// Monte Carlo oracle.

struct McEstimate {
    double mean = 0.0;
    double std_error = 0.0;
    std::size_t samples = 0;
};

/// Unbiased estimate of C(W)(k1) for the continuum: k2 uniform in the box
/// [-K, K]^3, n uniform on the sphere. Samples are drawn in 64 fixed blocks
/// with independent streams, so the result depends only on the seed.
inline McEstimate mc_oracle(const std::function<double(const Vec&)>& W, double K, const PairPotential& V, Statistics stats,
                            const Vec& k1, std::size_t n_samples, std::uint64_t seed)
{
    if (!(K > 0.0)) throw DomainError("mc_oracle needs a positive box half-width");
    require(n_samples >= 2, "mc_oracle needs at least two samples");
    constexpr std::size_t blocks = 64;
    constexpr std::uint64_t tag = 0x6d632d7575ULL;
    const double th = theta_of(stats);
    const double volume = std::pow(2.0 * K, 3) * 4.0 * pi;
    const double W1 = W(k1);
    struct Block {
        double n = 0.0, mean = 0.0, m2 = 0.0;
    };
    std::vector<Block> out(blocks);
    parallel_for(blocks, [&](std::size_t b) {
        auto rng = make_stream(seed, tag, b);
        std::uniform_real_distribution<double> u(0.0, 1.0);
        const std::size_t count = n_samples / blocks + (b < n_samples % blocks ? 1 : 0);
        Block& st = out[b];
        for (std::size_t s = 0; s < count; ++s) {
            const Vec k2{K * (2.0 * u(rng) - 1.0), K * (2.0 * u(rng) - 1.0), K * (2.0 * u(rng) - 1.0)};
            const double cz = 2.0 * u(rng) - 1.0, ph = two_pi * u(rng), sz = std::sqrt(std::max(0.0, 1.0 - cz * cz));
            const Vec nvec{sz * std::cos(ph), sz * std::sin(ph), cz};
            const double r = 0.5 * norm(k1 - k2);
            const Vec c = 0.5 * (k1 + k2);
            const Vec k3 = c + r * nvec, k4 = c - r * nvec;
            const double phi = collision_rate(V, stats, k1, k2, k3, k4);
            double x = 0.0;
            if (phi != 0.0) {
                const auto gl = uu_bracket(W1, W(k2), W(k3), W(k4), th);
                x = volume * 0.5 * r * phi * gl.net();
            }
            st.n += 1.0;
            const double delta = x - st.mean;
            st.mean += delta / st.n;
            st.m2 += delta * (x - st.mean);
        }
    });
    Block tot;
    for (const Block& b : out) {
        if (b.n == 0.0) continue;
        const double n = tot.n + b.n, delta = b.mean - tot.mean;
        tot.mean += delta * b.n / n;
        tot.m2 += b.m2 + delta * delta * tot.n * b.n / n;
        tot.n = n;
    }
    McEstimate e;
    e.samples = n_samples;
    e.mean = tot.mean;
    e.std_error = std::sqrt(tot.m2 / (tot.n - 1.0) / tot.n);
    return e;
}

/// Same, with W given on a box grid and evaluated by the interpolant used in
/// the deterministic quadrature.
inline McEstimate mc_oracle(const Distribution& W, const PairPotential& V, const Vec& k1, std::size_t n_samples,
                            std::uint64_t seed)
{
    require(W.grid != nullptr, "mc_oracle: distribution without grid");
    const auto interp = std::make_shared<LogFugacityInterpolant>(*W.grid, W.values, W.stats);
    return mc_oracle([interp](const Vec& k) { return (*interp)(k); }, W.grid->half_width(), V, W.stats, k1, n_samples,
                     seed);
}

// ---------------------------------------------------------------------------
// Entropy.

/// Entropy density s(W); x ln x is continued by 0 at x = 0.
inline double entropy_density(double w, Statistics stats)
{
    auto xlogx = [](double x) { return x > 0.0 ? x * std::log(x) : 0.0; };
    switch (stats) {
    case Statistics::Fermion:
        if (w > 1.0) throw InvariantViolation("fermion occupation " + std::to_string(w) + " exceeds 1");
        return -xlogx(1.0 - w) - xlogx(w);
    case Statistics::Boson: return xlogx(1.0 + w) - xlogx(w);
    case Statistics::Boltzmann: break;
    }
    return -xlogx(w);
}

inline double entropy(const Distribution& W)
{
    require(W.grid != nullptr, "entropy: distribution without grid");
    std::vector<double> s(W.size());
    for (std::size_t i = 0; i < W.size(); ++i) {
        if (!(W.values[i] >= 0.0)) throw InvariantViolation("entropy: negative occupation");
        s[i] = entropy_density(W.values[i], W.stats);
    }
    return integrate(*W.grid, s);
}

/// d sigma / dW: ln((1 + theta W) / W) for theta = +-1, -ln W - 1 for theta = 0.
inline double entropy_derivative(double w, Statistics stats)
{
    switch (stats) {
    case Statistics::Fermion: return std::log((1.0 - w) / w);
    case Statistics::Boson: return std::log1p(1.0 / w);
    case Statistics::Boltzmann: break;
    }
    return -std::log(w) - 1.0;
}

/// int sigma'(W) C(W) dk. Nodes where sigma' is infinite (W = 0, or W = 1
/// for fermions) are skipped; their contribution is nonnegative in the limit.
inline double entropy_production(const Distribution& W, std::span<const double> C)
{
    require(W.grid != nullptr && C.size() == W.size(), "entropy_production: size mismatch");
    std::vector<double> t(W.size(), 0.0);
    for (std::size_t i = 0; i < W.size(); ++i) {
        const double w = W.values[i];
        if (W.stats == Statistics::Fermion && w > 1.0) throw InvariantViolation("entropy_production: fermion occupation exceeds 1");
        if (!(w > 0.0) || (W.stats == Statistics::Fermion && w >= 1.0)) continue;
        t[i] = entropy_derivative(w, W.stats) * C[i];
    }
    return integrate(*W.grid, t);
}

inline double entropy_production(const Distribution& W, const UuOperator& op)
{
    return entropy_production(W, op.evaluate(W).C);
}

} // namespace qkin

#endif // QKIN_COLLISION_UU_HPP
