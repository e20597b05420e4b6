#ifndef QKIN_DISPERSION_HPP
#define QKIN_DISPERSION_HPP

#include <complex>
#include <optional>
#include <string>

#include "core.hpp"

namespace qkin {

enum class DispersionKind { LatticeNN, ContinuumQuadratic, PhononAcoustic, PhononOptical };

inline std::string to_string(DispersionKind k)
{
    switch (k) {
    case DispersionKind::LatticeNN: return "lattice";
    case DispersionKind::ContinuumQuadratic: return "continuum";
    case DispersionKind::PhononAcoustic: return "acoustic";
    case DispersionKind::PhononOptical: return "optical";
    }
    return "unknown";
}

inline DispersionKind dispersion_kind_from_string(const std::string& s)
{
    if (s == "lattice") return DispersionKind::LatticeNN;
    if (s == "continuum") return DispersionKind::ContinuumQuadratic;
    if (s == "acoustic") return DispersionKind::PhononAcoustic;
    if (s == "optical") return DispersionKind::PhononOptical;
    throw ConfigError("unknown dispersion model '" + s + "' (expected lattice|continuum|acoustic|optical)");
}

/// Dispersion relation omega(k) and its gradient.
///
/// Lattice kinds live on the torus [-pi, pi)^d with the normalized measure
/// dk/(2pi)^d. The phonon bands use omega^2 = omega0^2 + 4 sum sin^2(k_j/2),
/// which is |k| near the origin for the acoustic band and bounded below by
/// omega0 for the optical one.
class DispersionModel {
public:
    DispersionModel() = default;

    static DispersionModel lattice(int dim = 3) { return DispersionModel(DispersionKind::LatticeNN, dim, 0.0, {}); }
    static DispersionModel continuum(int dim = 3, std::optional<double> box_half_width = std::nullopt)
    {
        return DispersionModel(DispersionKind::ContinuumQuadratic, dim, 0.0, box_half_width);
    }
    static DispersionModel acoustic(int dim = 3) { return DispersionModel(DispersionKind::PhononAcoustic, dim, 0.0, {}); }
    static DispersionModel optical(double gap, int dim = 3)
    {
        return DispersionModel(DispersionKind::PhononOptical, dim, gap, {});
    }

    DispersionKind kind() const { return kind_; }
    int dim() const { return dim_; }
    double gap() const { return gap_; }
    std::optional<double> box_half_width() const { return box_; }
    bool on_torus() const { return kind_ != DispersionKind::ContinuumQuadratic; }

    /// Reduces torus coordinates to [-pi, pi]; validates continuum box.
    Vec reduce(const Vec& k) const
    {
        Vec r{0.0, 0.0, 0.0};
        for (int j = 0; j < dim_; ++j) {
            if (on_torus()) {
                // remainder is exact and odd, so reduction keeps k -> -k symmetry
                r[j] = std::abs(k[j]) <= pi ? k[j] : std::remainder(k[j], two_pi);
            } else {
                if (box_ && std::abs(k[j]) > *box_ * (1.0 + 1e-12))
                    throw DomainError("wavevector component " + std::to_string(k[j]) + " outside continuum box of half-width "
                                      + std::to_string(*box_));
                r[j] = k[j];
            }
        }
        return r;
    }

    double omega(const Vec& k_in) const
    {
        const Vec k = reduce(k_in);
        switch (kind_) {
        case DispersionKind::LatticeNN: {
            double s = 0.0;
            for (int j = 0; j < dim_; ++j) s += 1.0 - std::cos(k[j]);
            return s;
        }
        case DispersionKind::ContinuumQuadratic: return 0.5 * norm2(k);
        case DispersionKind::PhononAcoustic:
        case DispersionKind::PhononOptical: return std::sqrt(gap_ * gap_ + phonon_sin2(k));
        }
        return 0.0;
    }

    Vec group_velocity(const Vec& k_in) const
    {
        const Vec k = reduce(k_in);
        Vec v{0.0, 0.0, 0.0};
        switch (kind_) {
        case DispersionKind::LatticeNN:
            for (int j = 0; j < dim_; ++j) v[j] = std::sin(k[j]);
            return v;
        case DispersionKind::ContinuumQuadratic: return k;
        case DispersionKind::PhononAcoustic:
        case DispersionKind::PhononOptical: {
            const double w = std::sqrt(gap_ * gap_ + phonon_sin2(k));
            if (w == 0.0) throw DomainError("acoustic group velocity is singular at k = 0");
            for (int j = 0; j < dim_; ++j) v[j] = std::sin(k[j]) / w;
            return v;
        }
        }
        return v;
    }

    /// Band bottom, used for the bosonic condensation guard.
    double band_minimum() const { return kind_ == DispersionKind::PhononOptical ? gap_ : 0.0; }

    /// Upper band edge for torus kinds; infinity for the continuum.
    double band_maximum() const
    {
        switch (kind_) {
        case DispersionKind::LatticeNN: return 2.0 * dim_;
        case DispersionKind::ContinuumQuadratic: return box_ ? 0.5 * dim_ * (*box_) * (*box_) : INFINITY;
        default: return std::sqrt(gap_ * gap_ + 4.0 * dim_);
        }
    }

private:
    DispersionModel(DispersionKind kind, int dim, double gap, std::optional<double> box)
        : kind_(kind), dim_(dim), gap_(gap), box_(box)
    {
        if (dim < 1 || dim > 3) throw DomainError("dimension must be 1, 2 or 3");
        if (kind == DispersionKind::PhononOptical && !(gap > 0.0))
            throw DomainError("optical band needs a positive gap omega0");
        if (gap < 0.0) throw DomainError("gap must be nonnegative");
        if (box && !(*box > 0.0)) throw DomainError("continuum box half-width must be positive");
    }

    double phonon_sin2(const Vec& k) const
    {
        double s = 0.0;
        for (int j = 0; j < dim_; ++j) {
            const double h = std::sin(0.5 * k[j]);
            s += 4.0 * h * h;
        }
        return s;
    }

    DispersionKind kind_ = DispersionKind::LatticeNN;
    int dim_ = 3;
    double gap_ = 0.0;
    std::optional<double> box_;
};

// ---------------------------------------------------------------------------
// Free-propagator decay diagnostic: a(t) = |integral dk exp(-i omega(k) t)|.

struct PropagatorDecay {
    std::vector<double> t;
    std::vector<double> amplitude;
    std::vector<double> running_integral;
    double exponent = 0.0;        ///< decay exponent p in a(t) ~ t^{-p}
    double exponent_stderr = 0.0;
    double fit_t_min = 0.0;
    double fit_t_max = 0.0;
    bool fit_on_peaks = false;    ///< envelope fit through local maxima
    bool fit_unreliable = false;  ///< fit window shorter than one decade
    std::size_t nodes_per_axis = 0;
};

namespace detail {

/// Quadrature levels of a hyperoctahedrally symmetric integrand on a
/// product grid: one entry per sorted tuple of per-axis |k| classes.
struct SymmetricLevels {
    std::vector<double> omega;
    std::vector<double> weight; // normalized: sums to 1
};

inline SymmetricLevels symmetric_levels(const DispersionModel& model, std::size_t n)
{
    const int d = model.dim();
    // Per-axis classes of |k|: values and multiplicities.
    std::vector<double> absval;
    std::vector<double> count;
    if (model.on_torus()) {
        // trapezoid nodes k_m = -pi + 2 pi m / n, n even
        for (std::size_t m = 0; m <= n / 2; ++m) {
            absval.push_back(two_pi * static_cast<double>(m) / static_cast<double>(n));
            count.push_back((m == 0 || m == n / 2) ? 1.0 : 2.0);
        }
    } else {
        const double K = *model.box_half_width();
        const double h = 2.0 * K / static_cast<double>(n);
        for (std::size_t m = 0; m < n / 2; ++m) {
            absval.push_back((static_cast<double>(m) + 0.5) * h);
            count.push_back(2.0);
        }
    }
    const std::size_t c = absval.size();
    const double total = std::pow(static_cast<double>(n), d);
    SymmetricLevels lv;
    auto push = [&](std::array<std::size_t, 3> idx, int nd) {
        Vec k{0.0, 0.0, 0.0};
        double mult = 1.0;
        for (int j = 0; j < nd; ++j) {
            k[j] = absval[idx[j]];
            mult *= count[idx[j]];
        }
        // distinct permutations of the sorted index tuple
        double perms = 1.0;
        if (nd == 2) perms = idx[0] == idx[1] ? 1.0 : 2.0;
        if (nd == 3) {
            if (idx[0] == idx[1] && idx[1] == idx[2]) perms = 1.0;
            else if (idx[0] == idx[1] || idx[1] == idx[2]) perms = 3.0;
            else perms = 6.0;
        }
        lv.omega.push_back(model.omega(k));
        lv.weight.push_back(mult * perms / total);
    };
    if (d == 1) {
        for (std::size_t a = 0; a < c; ++a) push({a, 0, 0}, 1);
    } else if (d == 2) {
        for (std::size_t a = 0; a < c; ++a)
            for (std::size_t b = a; b < c; ++b) push({a, b, 0}, 2);
    } else {
        for (std::size_t a = 0; a < c; ++a)
            for (std::size_t b = a; b < c; ++b)
                for (std::size_t e = b; e < c; ++e) push({a, b, e}, 3);
    }
    return lv;
}

} // namespace detail

/// Samples a(t) on a uniform t-grid of n_t points over [0, t_max] and fits
/// the tail exponent on the last decade [t_max/10, t_max].
///
/// The k-quadrature is the trapezoid rule (torus) or midpoint rule (continuum
/// box) with a node count growing linearly in t_max, evaluated over the
/// symmetry-reduced wedge. When a(t) oscillates the fit runs through the
/// local maxima (the envelope), otherwise through all samples.
inline PropagatorDecay propagator_decay(const DispersionModel& model, double t_max, std::size_t n_t,
                                        std::size_t nodes_per_axis = 0)
{
    if (!(t_max > 0.0)) throw DomainError("t_max must be positive");
    if (n_t < 3) throw DomainError("need at least three time samples");
    if (!model.on_torus() && !model.box_half_width())
        throw DomainError("continuum propagator decay needs a truncation box");

    std::size_t n = nodes_per_axis;
    if (n == 0) {
        double scale = 1.5 * t_max;
        if (!model.on_torus()) {
            const double K = *model.box_half_width();
            scale = K * K * t_max / pi * 1.5 + 4.0 * K;
        }
        n = static_cast<std::size_t>(std::ceil(scale)) + 32;
    }
    if (n % 2) ++n;

    const auto lv = detail::symmetric_levels(model, n);
    const std::size_t L = lv.omega.size();

    PropagatorDecay out;
    out.nodes_per_axis = n;
    out.t.resize(n_t);
    out.amplitude.resize(n_t);
    out.running_integral.resize(n_t);
    const double dt = t_max / static_cast<double>(n_t - 1);

    std::vector<std::complex<double>> phase(L, {1.0, 0.0}), rot(L);
    for (std::size_t l = 0; l < L; ++l) rot[l] = std::polar(1.0, -lv.omega[l] * dt);

    for (std::size_t s = 0; s < n_t; ++s) {
        const double t = dt * static_cast<double>(s);
        if (s > 0 && s % 64 == 0) {
            for (std::size_t l = 0; l < L; ++l) phase[l] = std::polar(1.0, -lv.omega[l] * t);
        }
        // Neumaier-compensated sums; the level count reaches ~10^6 in 3D
        double re = 0.0, im = 0.0, cre = 0.0, cim = 0.0;
        for (std::size_t l = 0; l < L; ++l) {
            const double x = lv.weight[l] * phase[l].real(), y = lv.weight[l] * phase[l].imag();
            const double tr = re + x, ti = im + y;
            cre += std::abs(re) >= std::abs(x) ? (re - tr) + x : (x - tr) + re;
            cim += std::abs(im) >= std::abs(y) ? (im - ti) + y : (y - ti) + im;
            re = tr;
            im = ti;
        }
        out.t[s] = t;
        out.amplitude[s] = std::hypot(re + cre, im + cim);
        for (std::size_t l = 0; l < L; ++l) phase[l] *= rot[l];
    }
    out.running_integral[0] = 0.0;
    for (std::size_t s = 1; s < n_t; ++s)
        out.running_integral[s] = out.running_integral[s - 1] + 0.5 * dt * (out.amplitude[s] + out.amplitude[s - 1]);

    const double t_lo = std::max(1.0, t_max / 10.0);
    out.fit_t_min = t_lo;
    out.fit_t_max = t_max;
    out.fit_unreliable = t_max < 10.0;

    std::vector<double> lx, ly, px, py;
    for (std::size_t s = 1; s + 1 < n_t; ++s) {
        if (out.t[s] < t_lo) continue;
        const double a0 = out.amplitude[s - 1], a1 = out.amplitude[s], a2 = out.amplitude[s + 1];
        if (a1 > 0.0) {
            lx.push_back(std::log(out.t[s]));
            ly.push_back(std::log(a1));
        }
        if (a1 > a0 && a1 >= a2 && a0 > 0.0 && a2 > 0.0) {
            // parabolic refinement of the peak in log amplitude
            const double y0 = std::log(a0), y1 = std::log(a1), y2 = std::log(a2);
            const double den = y0 - 2.0 * y1 + y2;
            double off = 0.0, ypk = y1;
            if (den < 0.0) {
                off = 0.5 * (y0 - y2) / den;
                ypk = y1 - 0.25 * (y0 - y2) * off;
            }
            px.push_back(std::log(out.t[s] + off * dt));
            py.push_back(ypk);
        }
    }
    const bool use_peaks = px.size() >= 3;
    out.fit_on_peaks = use_peaks;
    if (use_peaks) {
        const auto f = fit_line(px, py);
        out.exponent = -f.slope;
        out.exponent_stderr = f.slope_stderr;
    } else if (lx.size() >= 2) {
        const auto f = fit_line(lx, ly);
        out.exponent = -f.slope;
        out.exponent_stderr = f.slope_stderr;
    } else {
        out.fit_unreliable = true;
    }
    return out;
}

} // namespace qkin

#endif // QKIN_DISPERSION_HPP
