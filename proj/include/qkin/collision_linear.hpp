#ifndef QKIN_COLLISION_LINEAR_HPP
#define QKIN_COLLISION_LINEAR_HPP

#include <Eigen/Dense>

#include "grids.hpp"
#include "ode.hpp"
#include "spectrum.hpp"

namespace qkin {

enum class MatrixStorage { Auto, Dense, LevelAggregated, Sparse };

inline std::string to_string(MatrixStorage s)
{
    switch (s) {
    case MatrixStorage::Auto: return "auto";
    case MatrixStorage::Dense: return "dense";
    case MatrixStorage::LevelAggregated: return "levels";
    case MatrixStorage::Sparse: return "sparse";
    }
    return "?";
}

/// Partition of grid nodes into sets of (numerically) equal energy.
struct EnergyLevels {
    std::vector<double> energy;            ///< per level
    std::vector<std::size_t> offset;       ///< level l owns members[offset[l] .. offset[l+1])
    std::vector<std::size_t> members;      ///< node indices sorted by level
    std::vector<std::size_t> level_of;     ///< per node

    std::size_t size() const { return energy.size(); }
    std::size_t count(std::size_t l) const { return offset[l + 1] - offset[l]; }
    std::span<const std::size_t> nodes(std::size_t l) const
    {
        return std::span<const std::size_t>(members).subspan(offset[l], count(l));
    }
};

/// Groups nodes whose energies differ from the first node of the level by at
/// most `width`.
inline EnergyLevels group_levels(std::span<const double> omega, double width)
{
    EnergyLevels lv;
    std::vector<std::size_t> order(omega.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return omega[a] < omega[b]; });
    lv.level_of.resize(omega.size());
    lv.members = order;
    double start = -INFINITY;
    for (std::size_t p = 0; p < order.size(); ++p) {
        const double w = omega[order[p]];
        if (w - start > width) {
            start = w;
            lv.energy.push_back(w);
            lv.offset.push_back(p);
        }
        lv.level_of[order[p]] = lv.energy.size() - 1;
    }
    lv.offset.push_back(order.size());
    return lv;
}

/// Discretized linear collision operator
///   (M W)_i = sum_{j != i} M_ij (W_j - W_i),
///   M_ij    = 2 pi w_j theta(k_i - k_j) delta_eta(omega_i - omega_j).
///
/// The loss term is the row sum of the gain kernel, so constants are
/// annihilated exactly and the quadrature mass is conserved.
///
/// Storage: dense below 20^3 nodes; for a constant spectrum on a uniform
/// product grid the kernel depends on energies only and is stored per pair of
/// energy levels (exact, arbitrary grid size); otherwise compressed rows with
/// |omega_i - omega_j| <= 6 eta.
class CollisionMatrix {
public:
    static constexpr std::size_t dense_limit = 8000;
    static constexpr double sparse_cutoff = 6.0;  // in units of eta
    static constexpr double level_cutoff = 12.0;  // kernel below e^{-72}: dropped
    static constexpr std::size_t level_table_limit = 25'000'000;

    CollisionMatrix(GridPtr grid, DispersionModel model, Spectrum spectrum, double eta,
                    MatrixStorage storage = MatrixStorage::Auto, double level_width = 1e-11)
        : grid_(std::move(grid)), model_(model), spectrum_(std::move(spectrum)), eta_(eta)
    {
        if (!(eta > 0.0)) throw DomainError("collision matrix smearing eta must be positive");
        if (grid_->dim() != model_.dim()) throw ContractViolation("grid and dispersion dimensions differ");
        if (model_.on_torus() != (grid_->kind() == GridKind::TorusUniform))
            throw ContractViolation("grid kind does not match the dispersion domain");
        omega_ = node_energies(*grid_, model_);
        const std::size_t n = grid_->size();
        bool uniform = true;
        for (double w : grid_->weights()) uniform = uniform && w == grid_->weight(0);
        if (storage == MatrixStorage::Auto) {
            if (n <= dense_limit) storage = MatrixStorage::Dense;
            else if (spectrum_.is_constant() && uniform) storage = MatrixStorage::LevelAggregated;
            else storage = MatrixStorage::Sparse;
        }
        if (storage == MatrixStorage::LevelAggregated && !(spectrum_.is_constant() && uniform))
            throw ContractViolation("level storage needs a constant spectrum and uniform weights");
        if (storage == MatrixStorage::Dense && n > 4 * dense_limit)
            throw SizeError("dense collision matrix with " + std::to_string(n) + " nodes is too large");
        if (spectrum_.is_constant() && spectrum_.amplitude() < 0.0)
            throw InvalidSpectrum("disorder spectrum is negative: " + spectrum_.describe());
        storage_ = storage;
        switch (storage_) {
        case MatrixStorage::Dense: build_dense(); break;
        case MatrixStorage::Sparse: build_sparse(); break;
        case MatrixStorage::LevelAggregated: build_levels(level_width); break;
        case MatrixStorage::Auto: break;
        }
    }

    const GridPtr& grid() const { return grid_; }
    const DispersionModel& model() const { return model_; }
    const Spectrum& spectrum() const { return spectrum_; }
    double eta() const { return eta_; }
    MatrixStorage storage() const { return storage_; }
    std::size_t size() const { return omega_.size(); }
    const std::vector<double>& energies() const { return omega_; }
    /// Loss rate -M_ii per node.
    const std::vector<double>& loss_rate() const { return loss_; }
    double max_rate() const { return *std::max_element(loss_.begin(), loss_.end()); }

    /// Off-diagonal entry from the defining formula (any storage).
    double entry(std::size_t i, std::size_t j) const
    {
        if (i == j) return 0.0;
        const double th = spectrum_(grid_->node(i) - grid_->node(j), model_.on_torus());
        if (th < 0.0) throw InvalidSpectrum("disorder spectrum negative at a grid difference vector");
        return two_pi * grid_->weight(j) * th * smeared_delta(omega_[i] - omega_[j], eta_);
    }

    void apply(std::span<const double> W, std::span<double> out) const
    {
        const std::size_t n = size();
        if (W.size() != n || out.size() != n) throw ContractViolation("collision apply: size mismatch with grid");
        switch (storage_) {
        case MatrixStorage::Dense:
            parallel_for(n, [&](std::size_t i) {
                const double* row = dense_.data() + i * n;
                const double wi = W[i];
                double s = 0.0;
                for (std::size_t j = 0; j < n; ++j) s += row[j] * (W[j] - wi);
                out[i] = s;
            });
            break;
        case MatrixStorage::Sparse:
            parallel_for(n, [&](std::size_t i) {
                const double wi = W[i];
                double s = 0.0;
                for (std::size_t p = row_ptr_[i]; p < row_ptr_[i + 1]; ++p) s += val_[p] * (W[col_[p]] - wi);
                out[i] = s;
            });
            break;
        case MatrixStorage::LevelAggregated: apply_levels(W, out); break;
        case MatrixStorage::Auto: break;
        }
    }

    std::vector<double> apply(std::span<const double> W) const
    {
        std::vector<double> out(W.size());
        apply(W, out);
        return out;
    }

    std::vector<double> apply(const Distribution& W) const
    {
        if (!W.grid->same_as(*grid_)) throw ContractViolation("collision apply: distribution lives on a different grid");
        return apply(W.values);
    }

    /// Full matrix including the diagonal.
    Eigen::MatrixXd dense() const
    {
        const std::size_t n = size();
        if (n > dense_limit) throw SizeError("dense() limited to " + std::to_string(dense_limit) + " nodes");
        Eigen::MatrixXd A(n, n);
        for (std::size_t i = 0; i < n; ++i) {
            double s = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
                const double e = i == j ? 0.0 : entry(i, j);
                A(i, j) = e;
                s += e;
            }
            A(i, i) = -s;
        }
        return A;
    }

    /// Generator restricted to a node subset, row sums re-zeroed inside it.
    Eigen::MatrixXd restricted(const std::vector<std::size_t>& idx) const
    {
        const std::size_t m = idx.size();
        Eigen::MatrixXd A = Eigen::MatrixXd::Zero(m, m);
        parallel_for(m, [&](std::size_t a) {
            for (std::size_t b = 0; b < m; ++b)
                if (a != b) A(a, b) = entry(idx[a], idx[b]);
        });
        for (std::size_t a = 0; a < m; ++a) A(a, a) = -A.row(a).sum();
        return A;
    }

    const EnergyLevels* levels() const { return storage_ == MatrixStorage::LevelAggregated ? &levels_ : nullptr; }

private:
    void build_dense()
    {
        const std::size_t n = size();
        dense_.assign(n * n, 0.0);
        loss_.assign(n, 0.0);
        parallel_for(n, [&](std::size_t i) {
            double s = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
                if (j == i) continue;
                const double e = entry(i, j);
                dense_[i * n + j] = e;
                s += e;
            }
            loss_[i] = s;
        });
    }

    void build_sparse()
    {
        const std::size_t n = size();
        std::vector<std::size_t> order(n);
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return omega_[a] < omega_[b]; });
        std::vector<double> sorted(n);
        for (std::size_t p = 0; p < n; ++p) sorted[p] = omega_[order[p]];
        std::vector<std::vector<std::pair<std::size_t, double>>> rows(n);
        const double cut = sparse_cutoff * eta_;
        loss_.assign(n, 0.0);
        parallel_for(n, [&](std::size_t i) {
            const auto lo = std::lower_bound(sorted.begin(), sorted.end(), omega_[i] - cut) - sorted.begin();
            const auto hi = std::upper_bound(sorted.begin(), sorted.end(), omega_[i] + cut) - sorted.begin();
            auto& r = rows[i];
            for (auto p = lo; p < hi; ++p) {
                const std::size_t j = order[p];
                if (j == i) continue;
                const double e = entry(i, j);
                if (e != 0.0) r.emplace_back(j, e);
            }
            std::sort(r.begin(), r.end());
            double s = 0.0;
            for (const auto& [j, e] : r) s += e;
            loss_[i] = s;
        });
        row_ptr_.assign(n + 1, 0);
        for (std::size_t i = 0; i < n; ++i) row_ptr_[i + 1] = row_ptr_[i] + rows[i].size();
        col_.resize(row_ptr_[n]);
        val_.resize(row_ptr_[n]);
        for (std::size_t i = 0; i < n; ++i) {
            std::size_t p = row_ptr_[i];
            for (const auto& [j, e] : rows[i]) {
                col_[p] = j;
                val_[p] = e;
                ++p;
            }
        }
    }

    void build_levels(double width)
    {
        levels_ = group_levels(omega_, width);
        const std::size_t L = levels_.size();
        level_c_ = two_pi * grid_->weight(0) * spectrum_.amplitude();
        const double cut = level_cutoff * eta_;
        llo_.resize(L);
        lhi_.resize(L);
        std::size_t entries = 0;
        for (std::size_t l = 0; l < L; ++l) {
            llo_[l] = std::lower_bound(levels_.energy.begin(), levels_.energy.end(), levels_.energy[l] - cut)
                      - levels_.energy.begin();
            lhi_[l] = std::upper_bound(levels_.energy.begin(), levels_.energy.end(), levels_.energy[l] + cut)
                      - levels_.energy.begin();
            entries += lhi_[l] - llo_[l];
        }
        // the banded level kernel is tabulated when it fits in ~200 MB,
        // otherwise evaluated on the fly
        lrow_.clear();
        lval_.clear();
        if (entries <= level_table_limit) {
            lrow_.assign(L + 1, 0);
            for (std::size_t l = 0; l < L; ++l) lrow_[l + 1] = lrow_[l] + (lhi_[l] - llo_[l]);
            lval_.resize(entries);
            parallel_for(L, [&](std::size_t l) {
                for (std::size_t m = llo_[l]; m < lhi_[l]; ++m) lval_[lrow_[l] + m - llo_[l]] = level_kernel(l, m);
            });
        }
        level_rate_.assign(L, 0.0);
        parallel_for(L, [&](std::size_t l) {
            double rate = 0.0;
            for (std::size_t m = llo_[l]; m < lhi_[l]; ++m)
                // the i = j term contributes nothing; level m counts i itself
                rate += kernel_at(l, m) * static_cast<double>(levels_.count(m) - (m == l ? 1 : 0));
            level_rate_[l] = rate;
        });
        loss_.resize(size());
        for (std::size_t i = 0; i < size(); ++i) loss_[i] = level_rate_[levels_.level_of[i]];
    }

    double level_kernel(std::size_t l, std::size_t m) const
    {
        return level_c_ * smeared_delta(levels_.energy[l] - levels_.energy[m], eta_);
    }

    double kernel_at(std::size_t l, std::size_t m) const
    {
        return lval_.empty() ? level_kernel(l, m) : lval_[lrow_[l] + m - llo_[l]];
    }

    void apply_levels(std::span<const double> W, std::span<double> out) const
    {
        const std::size_t L = levels_.size();
        // level means written as anchor + mean deviation: exact for constants
        std::vector<double> mean(L), cnt(L);
        parallel_for(L, [&](std::size_t l) {
            const auto nodes = levels_.nodes(l);
            const double anchor = W[nodes[0]];
            double dev = 0.0;
            for (std::size_t i : nodes) dev += W[i] - anchor;
            mean[l] = anchor + dev / static_cast<double>(nodes.size());
            cnt[l] = static_cast<double>(nodes.size());
        });
        parallel_for(L, [&](std::size_t l) {
            const auto nodes = levels_.nodes(l);
            // sum_m K_lm n_m (mean_m - W_i) split around the level anchor a:
            // G - R (W_i - a) with G = sum_m K_lm n_m (mean_m - a); both
            // factors vanish exactly for constant W
            const double a = W[nodes[0]];
            double G = 0.0, R = 0.0;
            for (std::size_t m = llo_[l]; m < lhi_[l]; ++m) {
                const double kn = kernel_at(l, m) * cnt[m];
                G += kn * (mean[m] - a);
                R += kn;
            }
            for (std::size_t i : nodes) out[i] = G - R * (W[i] - a);
        });
    }

    GridPtr grid_;
    DispersionModel model_;
    Spectrum spectrum_;
    double eta_;
    MatrixStorage storage_ = MatrixStorage::Dense;
    std::vector<double> omega_;
    std::vector<double> loss_;
    // dense
    std::vector<double> dense_;
    // sparse
    std::vector<std::size_t> row_ptr_, col_;
    std::vector<double> val_;
    // levels
    EnergyLevels levels_;
    std::vector<std::size_t> lrow_, llo_, lhi_;
    std::vector<double> lval_, level_rate_;
    double level_c_ = 0.0;
};

/// ||M f(omega)||_inf / ||f(omega)||_inf.
template <class F>
double stationarity_residual(const CollisionMatrix& M, F&& f)
{
    const auto& om = M.energies();
    std::vector<double> v(om.size());
    double fmax = 0.0;
    for (std::size_t i = 0; i < om.size(); ++i) {
        v[i] = f(om[i]);
        fmax = std::max(fmax, std::abs(v[i]));
    }
    if (fmax == 0.0) return 0.0;
    const auto r = M.apply(v);
    double rmax = 0.0;
    for (double x : r) rmax = std::max(rmax, std::abs(x));
    return rmax / fmax;
}

/// sqrt(sum_i w_i (W_i - <W>_level(i))^2): distance of W from the
/// level-constant functions.
inline double shell_deviation(const MomentumGrid& grid, const EnergyLevels& lv, std::span<const double> W)
{
    std::vector<double> terms(W.size());
    for (std::size_t l = 0; l < lv.size(); ++l) {
        const auto nodes = lv.nodes(l);
        double wsum = 0.0, m = 0.0;
        for (std::size_t i : nodes) {
            wsum += grid.weight(i);
            m += grid.weight(i) * W[i];
        }
        m /= wsum;
        for (std::size_t i : nodes) terms[i] = grid.weight(i) * (W[i] - m) * (W[i] - m);
    }
    return std::sqrt(pairwise_sum(terms));
}

/// Decay rate of shell deviations: smallest eigenvalue of -M on the
/// complement of level-constant functions. Exact (dense eigenproblem) up to
/// `exact_limit` nodes; above that the minimum loss rate over multi-node
/// levels, which is exact for constant spectra.
inline double shell_spectral_gap(const CollisionMatrix& M, const EnergyLevels& lv, std::size_t exact_limit = 2000)
{
    const std::size_t n = M.size();
    if (n <= exact_limit) {
        Eigen::MatrixXd A = -M.dense();
        A = 0.5 * (A + A.transpose());
        Eigen::MatrixXd P = Eigen::MatrixXd::Identity(n, n);
        for (std::size_t l = 0; l < lv.size(); ++l) {
            const auto nodes = lv.nodes(l);
            const double inv = 1.0 / static_cast<double>(nodes.size());
            for (std::size_t a : nodes)
                for (std::size_t b : nodes) P(a, b) -= inv;
        }
        const Eigen::MatrixXd Q = P * A * P;
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(Q, Eigen::EigenvaluesOnly);
        const auto& ev = es.eigenvalues();
        // the level-constant subspace contributes lv.size() zero eigenvalues
        return ev(static_cast<Eigen::Index>(lv.size()));
    }
    double gap = INFINITY;
    for (std::size_t l = 0; l < lv.size(); ++l)
        if (lv.count(l) > 1)
            for (std::size_t i : lv.nodes(l)) gap = std::min(gap, M.loss_rate()[i]);
    return gap;
}

struct RelaxResult {
    std::vector<double> times;
    std::vector<std::vector<double>> snapshots;
    std::vector<double> mass;
    std::vector<double> energy;
    std::vector<double> shell_deviation;
    double mass_drift = 0.0;    ///< max |mass(t) - mass(0)| / |mass(0)|
    double energy_drift = 0.0;  ///< |energy(t_max) - energy(0)| / t_max
    double spectral_gap_estimate = 0.0;
    OdeStats stats;
};

/// Integrates dW/dt = M W by adaptive RK4, recording snapshots at the
/// configured cadence together with mass, energy and shell deviation.
inline RelaxResult relax_to_shell(const CollisionMatrix& M, const Distribution& W0, double t_max, SolverConfig cfg = {},
                                  double level_width = 1e-9, bool compute_gap = true)
{
    if (!W0.grid->same_as(*M.grid())) throw ContractViolation("relax_to_shell: distribution lives on a different grid");
    check_admissible(W0.values, Statistics::Boltzmann, "initial distribution");
    cfg.t_max = t_max;
    cfg.dt = std::min(cfg.dt, 0.5 / std::max(M.max_rate(), 1e-300));
    cfg.dt_min = std::min(cfg.dt_min, cfg.dt);
    const auto& grid = *M.grid();
    const auto lv = group_levels(M.energies(), level_width);
    RelaxResult res;
    auto record = [&](double t, std::span<const double> y) {
        const auto m = moments(grid, M.model(), y);
        res.times.push_back(t);
        res.snapshots.emplace_back(y.begin(), y.end());
        res.mass.push_back(m.mass);
        res.energy.push_back(m.energy);
        res.shell_deviation.push_back(shell_deviation(grid, lv, y));
    };
    std::vector<double> y = W0.values;
    const auto stops = snapshot_times(0.0, t_max, cfg.snapshot_every);
    std::size_t next = 0;
    double mass0 = 0.0, worst = 0.0;
    AdaptiveRk4 rk(cfg);
    res.stats = rk.run(
        y, 0.0, t_max, [&](std::span<const double> w, std::span<double> dw) { M.apply(w, dw); },
        [&](std::span<const double> next_y, std::span<const double>) { return is_admissible(next_y, Statistics::Boltzmann); },
        [&](double t, std::span<const double> w, const StepInfo&) {
            if (t == 0.0) {
                record(t, w);
                mass0 = res.mass.back();
                return;
            }
            const double m = integrate(grid, w);
            worst = std::max(worst, std::abs(m - mass0));
            while (next < stops.size() && std::abs(t - stops[next]) <= 1e-12 * std::max(1.0, t)) {
                record(t, w);
                ++next;
            }
        },
        stops);
    res.mass_drift = worst / std::max(std::abs(mass0), 1e-300);
    res.energy_drift = t_max > 0.0 ? std::abs(res.energy.back() - res.energy.front()) / t_max : 0.0;
    res.spectral_gap_estimate = compute_gap ? shell_spectral_gap(M, lv) : 0.0;
    return res;
}

} // namespace qkin

#endif // QKIN_COLLISION_LINEAR_HPP
