#ifndef QKIN_GRIDS_HPP
#define QKIN_GRIDS_HPP

#include <memory>
#include <optional>

#include "core.hpp"
#include "dispersion.hpp"

namespace qkin {

enum class GridKind { TorusUniform, BoxUniform };

/// Quadrature-weighted discretization of momentum space.
///
/// Product grids are stored row-major (last axis fastest). A grid obtained
/// from subset() keeps the parent's nodes and weights for the selected
/// indices and is no longer a product grid.
class MomentumGrid {
public:
    static MomentumGrid torus(int dim, std::size_t n)
    {
        MomentumGrid g(GridKind::TorusUniform, dim, n, 0.0);
        return g;
    }

    static MomentumGrid box(int dim, std::size_t n, double half_width = 6.0)
    {
        if (!(half_width > 0.0)) throw DomainError("box half-width must be positive");
        return MomentumGrid(GridKind::BoxUniform, dim, n, half_width);
    }

    GridKind kind() const { return kind_; }
    int dim() const { return dim_; }
    std::size_t points_per_axis() const { return n_; }
    double half_width() const { return half_width_; }
    double spacing() const { return spacing_; }
    bool is_product() const { return parent_index_.empty(); }
    std::size_t size() const { return nodes_.size(); }
    const std::vector<Vec>& nodes() const { return nodes_; }
    const std::vector<double>& weights() const { return weights_; }
    const Vec& node(std::size_t i) const { return nodes_[i]; }
    double weight(std::size_t i) const { return weights_[i]; }
    /// For subset grids: index of each node in the parent product grid.
    const std::vector<std::size_t>& parent_index() const { return parent_index_; }

    double total_measure() const
    {
        return kind_ == GridKind::TorusUniform ? 1.0 : std::pow(2.0 * half_width_, dim_);
    }

    /// 1D coordinate of index m along any axis.
    double coordinate(std::size_t m) const
    {
        // written as spacing * (signed offset) so mirrored nodes are exact negatives
        const double half = 0.5 * static_cast<double>(n_);
        if (kind_ == GridKind::TorusUniform) return spacing_ * (static_cast<double>(m) - half);
        return spacing_ * (static_cast<double>(m) + 0.5 - half);
    }

    /// Index of the node at -k (mod 2 pi on the torus).
    std::size_t mirror_index(std::size_t i) const
    {
        auto a = axis_indices(i);
        for (int j = 0; j < dim_; ++j) a[j] = kind_ == GridKind::TorusUniform ? (n_ - a[j]) % n_ : n_ - 1 - a[j];
        return flat_index(a);
    }

    /// Momentum coordinate used by the momentum moment. On the torus the
    /// zone-boundary coordinate -pi is its own mirror image and carries no
    /// momentum.
    Vec momentum_coordinate(std::size_t i) const
    {
        Vec k = nodes_[i];
        if (kind_ == GridKind::TorusUniform && is_product()) {
            const auto a = axis_indices(i);
            for (int j = 0; j < dim_; ++j)
                if (a[j] == 0) k[j] = 0.0;
        } else if (kind_ == GridKind::TorusUniform) {
            for (int j = 0; j < dim_; ++j)
                if (k[j] == -pi) k[j] = 0.0;
        }
        return k;
    }

    std::array<std::size_t, 3> axis_indices(std::size_t i) const
    {
        require(is_product(), "axis_indices needs a product grid");
        std::array<std::size_t, 3> a{0, 0, 0};
        for (int j = dim_ - 1; j >= 0; --j) {
            a[j] = i % n_;
            i /= n_;
        }
        return a;
    }

    std::size_t flat_index(const std::array<std::size_t, 3>& a) const
    {
        std::size_t i = 0;
        for (int j = 0; j < dim_; ++j) i = i * n_ + a[j];
        return i;
    }

    MomentumGrid subset(const std::vector<std::size_t>& indices) const
    {
        require(is_product(), "subset of a subset grid is not supported");
        MomentumGrid g = *this;
        g.nodes_.clear();
        g.weights_.clear();
        g.parent_index_ = indices;
        for (std::size_t i : indices) {
            require(i < nodes_.size(), "subset index out of range");
            g.nodes_.push_back(nodes_[i]);
            g.weights_.push_back(weights_[i]);
        }
        return g;
    }

    /// Same nodes with replacement quadrature weights.
    MomentumGrid reweighted(std::vector<double> weights) const
    {
        require(weights.size() == nodes_.size(), "reweighted: one weight per node required");
        MomentumGrid g = *this;
        g.weights_ = std::move(weights);
        return g;
    }

    bool same_as(const MomentumGrid& o) const
    {
        return kind_ == o.kind_ && dim_ == o.dim_ && n_ == o.n_ && half_width_ == o.half_width_
               && parent_index_ == o.parent_index_;
    }

private:
    MomentumGrid(GridKind kind, int dim, std::size_t n, double half_width)
        : kind_(kind), dim_(dim), n_(n), half_width_(half_width)
    {
        if (dim < 1 || dim > 3) throw DomainError("grid dimension must be 1, 2 or 3");
        if (n < 2) throw DomainError("need at least two points per axis");
        spacing_ = kind == GridKind::TorusUniform ? two_pi / static_cast<double>(n) : 2.0 * half_width / static_cast<double>(n);
        std::size_t total = 1;
        for (int j = 0; j < dim; ++j) total *= n;
        nodes_.resize(total);
        const double w = kind == GridKind::TorusUniform ? 1.0 / static_cast<double>(total) : std::pow(spacing_, dim);
        weights_.assign(total, w);
        for (std::size_t i = 0; i < total; ++i) {
            auto a = axis_indices(i);
            Vec k{0.0, 0.0, 0.0};
            for (int j = 0; j < dim; ++j) k[j] = coordinate(a[j]);
            nodes_[i] = k;
        }
    }

    GridKind kind_;
    int dim_;
    std::size_t n_;
    double half_width_;
    double spacing_ = 0.0;
    std::vector<Vec> nodes_;
    std::vector<double> weights_;
    std::vector<std::size_t> parent_index_;
};

using GridPtr = std::shared_ptr<const MomentumGrid>;

inline GridPtr make_grid(MomentumGrid g) { return std::make_shared<const MomentumGrid>(std::move(g)); }

/// Grid matching a dispersion model: torus for lattice/phonon kinds, box for
/// the continuum.
inline MomentumGrid grid_for(const DispersionModel& model, std::size_t n, double box_half_width = 6.0)
{
    if (model.on_torus()) return MomentumGrid::torus(model.dim(), n);
    return MomentumGrid::box(model.dim(), n, model.box_half_width().value_or(box_half_width));
}

inline std::vector<double> node_energies(const MomentumGrid& grid, const DispersionModel& model)
{
    std::vector<double> w(grid.size());
    for (std::size_t i = 0; i < grid.size(); ++i) w[i] = model.omega(grid.node(i));
    return w;
}

// ---------------------------------------------------------------------------

/// Nonnegative momentum distribution W(k) on a grid.
struct Distribution {
    GridPtr grid;
    std::vector<double> values;
    Statistics stats = Statistics::Boltzmann;

    Distribution() = default;
    Distribution(GridPtr g, std::vector<double> v, Statistics s) : grid(std::move(g)), values(std::move(v)), stats(s)
    {
        require(grid && values.size() == grid->size(), "distribution size does not match grid");
    }
    Distribution(GridPtr g, double fill, Statistics s)
        : Distribution(g, std::vector<double>(g ? g->size() : 0, fill), s)
    {
    }

    std::size_t size() const { return values.size(); }
};

/// Throws InvariantViolation unless 0 <= W (and W <= 1 for fermions).
inline void check_admissible(std::span<const double> values, Statistics stats, const std::string& where = "distribution")
{
    for (std::size_t i = 0; i < values.size(); ++i) {
        const double w = values[i];
        if (!(w >= 0.0) || !std::isfinite(w))
            throw InvariantViolation(where + ": value " + std::to_string(w) + " at node " + std::to_string(i) + " is not >= 0");
        if (stats == Statistics::Fermion && w > 1.0)
            throw InvariantViolation(where + ": fermion occupation " + std::to_string(w) + " at node " + std::to_string(i)
                                     + " exceeds 1");
    }
}

inline bool is_admissible(std::span<const double> values, Statistics stats)
{
    for (double w : values) {
        if (!(w >= 0.0) || !std::isfinite(w)) return false;
        if (stats == Statistics::Fermion && w > 1.0) return false;
    }
    return true;
}

inline void check_admissible(const Distribution& W) { check_admissible(W.values, W.stats); }

// ---------------------------------------------------------------------------

inline double integrate(const MomentumGrid& grid, std::span<const double> f)
{
    if (f.size() != grid.size())
        throw ContractViolation("integrate: " + std::to_string(f.size()) + " values for " + std::to_string(grid.size())
                                + " nodes");
    std::vector<double> terms(f.size());
    for (std::size_t i = 0; i < f.size(); ++i) terms[i] = grid.weight(i) * f[i];
    return pairwise_sum(terms);
}

struct Moments {
    double mass = 0.0;
    Vec momentum{0.0, 0.0, 0.0};
    double energy = 0.0;
};

inline Moments moments(const MomentumGrid& grid, const DispersionModel& model, std::span<const double> values)
{
    require(values.size() == grid.size(), "moments: size mismatch");
    Moments m;
    const std::size_t n = grid.size();
    std::vector<double> t0(n), te(n);
    std::array<std::vector<double>, 3> tp;
    for (auto& v : tp) v.assign(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        const double wf = grid.weight(i) * values[i];
        t0[i] = wf;
        te[i] = wf * model.omega(grid.node(i));
    }
    // Momentum terms are folded over mirror pairs so that an even W has
    // exactly zero momentum.
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t p = grid.is_product() ? grid.mirror_index(i) : i;
        if (p < i) continue;
        const Vec ki = grid.momentum_coordinate(i);
        const double wi = grid.weight(i) * values[i];
        for (int j = 0; j < 3; ++j) {
            tp[j][i] = wi * ki[j];
            if (p != i) tp[j][i] += grid.weight(p) * values[p] * grid.momentum_coordinate(p)[j];
        }
    }
    m.mass = pairwise_sum(t0);
    m.momentum = {pairwise_sum(tp[0]), pairwise_sum(tp[1]), pairwise_sum(tp[2])};
    m.energy = pairwise_sum(te);
    return m;
}

inline Moments moments(const Distribution& W, const DispersionModel& model)
{
    return moments(*W.grid, model, W.values);
}

// ---------------------------------------------------------------------------

/// Per-node weights s_i = w_i * delta_eta(omega(k_i) - E).
struct ShellWeights {
    double energy = 0.0;
    double eta = 0.0;
    std::vector<double> s;

    double total() const { return pairwise_sum(s); }
};

inline ShellWeights energy_shell(const MomentumGrid& grid, const DispersionModel& model, double E, double eta)
{
    if (!(eta > 0.0)) throw DomainError("energy_shell: eta must be positive");
    ShellWeights sw;
    sw.energy = E;
    sw.eta = eta;
    sw.s.resize(grid.size());
    double nearest = INFINITY;
    bool any = false;
    for (std::size_t i = 0; i < grid.size(); ++i) {
        const double dw = model.omega(grid.node(i)) - E;
        nearest = std::min(nearest, std::abs(dw));
        sw.s[i] = grid.weight(i) * smeared_delta(dw, eta);
        any = any || sw.s[i] >= 1e-30;
    }
    if (!any || nearest > 6.0 * eta)
        throw EmptyShell("energy shell at E=" + std::to_string(E) + " with eta=" + std::to_string(eta)
                         + " contains no grid node (nearest energy offset " + std::to_string(nearest) + ")");
    return sw;
}

/// Median over nodes near the shell of the smallest nonzero energy step to
/// an axis neighbour.
inline double shell_energy_spacing(const MomentumGrid& grid, const DispersionModel& model, double E)
{
    require(grid.is_product(), "shell_energy_spacing needs a product grid");
    const auto w = node_energies(grid, model);
    const std::size_t n = grid.points_per_axis();
    const double h = grid.spacing();
    std::vector<double> spacings;
    auto neighbour_min = [&](std::size_t i) {
        const auto a = grid.axis_indices(i);
        double best = INFINITY;
        for (int j = 0; j < grid.dim(); ++j) {
            for (int s : {-1, 1}) {
                auto b = a;
                if (grid.kind() == GridKind::TorusUniform) {
                    b[j] = (a[j] + n + s) % n;
                } else {
                    if ((s < 0 && a[j] == 0) || (s > 0 && a[j] + 1 == n)) continue;
                    b[j] = a[j] + s;
                }
                const double dw = std::abs(w[grid.flat_index(b)] - w[i]);
                if (dw > 1e-14) best = std::min(best, dw);
            }
        }
        return best;
    };
    for (std::size_t i = 0; i < grid.size(); ++i) {
        const Vec v = model.kind() == DispersionKind::PhononAcoustic && norm2(grid.node(i)) == 0.0
                          ? Vec{1.0, 1.0, 1.0}
                          : model.group_velocity(grid.node(i));
        double vmax = 0.0;
        for (int j = 0; j < grid.dim(); ++j) vmax = std::max(vmax, std::abs(v[j]));
        if (std::abs(w[i] - E) <= h * vmax + 0.5 * h * h) {
            const double b = neighbour_min(i);
            if (std::isfinite(b)) spacings.push_back(b);
        }
    }
    if (spacings.empty()) {
        // fall back to the 64 nodes closest in energy
        std::vector<std::size_t> order(grid.size());
        std::iota(order.begin(), order.end(), 0);
        const std::size_t m = std::min<std::size_t>(64, order.size());
        std::partial_sort(order.begin(), order.begin() + m, order.end(),
                          [&](std::size_t a, std::size_t b) { return std::abs(w[a] - E) < std::abs(w[b] - E); });
        for (std::size_t q = 0; q < m; ++q) {
            const double b = neighbour_min(order[q]);
            if (std::isfinite(b)) spacings.push_back(b);
        }
    }
    if (spacings.empty()) throw EmptyShell("no energy spacing available near E=" + std::to_string(E));
    std::nth_element(spacings.begin(), spacings.begin() + spacings.size() / 2, spacings.end());
    return spacings[spacings.size() / 2];
}

/// Default smearing width: twice the median nearest-node energy spacing.
inline double auto_eta(const MomentumGrid& grid, const DispersionModel& model, double E)
{
    return 2.0 * shell_energy_spacing(grid, model, E);
}

// ---------------------------------------------------------------------------

/// Uniform periodic spatial grid. Axes may have different cell counts (an
/// axis with a single cell is a direction along which the field is uniform);
/// all cells share the same side length.
struct SpatialGrid {
    int dim = 3;
    std::array<std::size_t, 3> cells{1, 1, 1};
    double cell_size = 1.0;

    static SpatialGrid cube(int dim, std::size_t m, double side)
    {
        SpatialGrid s;
        s.dim = dim;
        for (int j = 0; j < 3; ++j) s.cells[j] = j < dim ? m : 1;
        s.cell_size = side / static_cast<double>(m);
        return s;
    }

    std::size_t size() const { return cells[0] * cells[1] * cells[2]; }
    double cell_volume() const { return std::pow(cell_size, dim); }
    double side(int axis) const { return static_cast<double>(cells[axis]) * cell_size; }

    std::array<std::size_t, 3> axis_indices(std::size_t c) const
    {
        return {c / (cells[1] * cells[2]), (c / cells[2]) % cells[1], c % cells[2]};
    }
    std::size_t flat_index(const std::array<std::size_t, 3>& a) const
    {
        return (a[0] * cells[1] + a[1]) * cells[2] + a[2];
    }
    Vec center(std::size_t c) const
    {
        const auto a = axis_indices(c);
        Vec r{0.0, 0.0, 0.0};
        for (int j = 0; j < dim; ++j) r[j] = (static_cast<double>(a[j]) + 0.5) * cell_size;
        return r;
    }
};

/// Phase-space density W(r, k): one Distribution per spatial cell, stored
/// row-major with the momentum index fastest.
struct WignerField {
    SpatialGrid space;
    GridPtr grid;
    Statistics stats = Statistics::Boltzmann;
    std::vector<double> values;

    WignerField() = default;
    WignerField(SpatialGrid s, GridPtr g, Statistics st)
        : space(s), grid(std::move(g)), stats(st), values(space.size() * grid->size(), 0.0)
    {
    }

    std::size_t cells() const { return space.size(); }
    std::size_t nodes() const { return grid->size(); }
    double& at(std::size_t cell, std::size_t node) { return values[cell * nodes() + node]; }
    double at(std::size_t cell, std::size_t node) const { return values[cell * nodes() + node]; }
    std::span<double> cell(std::size_t c) { return std::span<double>(values).subspan(c * nodes(), nodes()); }
    std::span<const double> cell(std::size_t c) const
    {
        return std::span<const double>(values).subspan(c * nodes(), nodes());
    }

    /// Position density rho(r) = integral dk W(r, k) per cell.
    std::vector<double> density() const
    {
        std::vector<double> rho(cells());
        for (std::size_t c = 0; c < cells(); ++c) rho[c] = integrate(*grid, cell(c));
        return rho;
    }

    double total_mass() const
    {
        const auto rho = density();
        return pairwise_sum(rho) * space.cell_volume();
    }
};

} // namespace qkin

#endif // QKIN_GRIDS_HPP
