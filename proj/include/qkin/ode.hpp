#ifndef QKIN_ODE_HPP
#define QKIN_ODE_HPP

#include <functional>
#include <limits>

#include "core.hpp"

namespace qkin {

enum class SplittingOrder { Lie, Strang };

struct SolverConfig {
    double dt = 0.05;
    double dt_min = 1e-9;
    double dt_max = std::numeric_limits<double>::infinity();
    double tolerance = 1e-8;
    double t_max = 1.0;
    /// Snapshot spacing in time; 0 records only the initial and final state.
    double snapshot_every = 0.0;
    SplittingOrder splitting = SplittingOrder::Strang;
    int max_rejections = 60;

    void validate() const
    {
        if (!(dt_min > 0.0) || !(dt >= dt_min)) throw DomainError("solver config needs 0 < dt_min <= dt");
        if (!(tolerance > 0.0)) throw DomainError("solver tolerance must be positive");
        if (!(t_max >= 0.0)) throw DomainError("t_max must be nonnegative");
        if (snapshot_every < 0.0) throw DomainError("snapshot cadence must be nonnegative");
    }
};

using Rhs = std::function<void(std::span<const double> y, std::span<double> dy)>;

/// Accepted step record passed to observers.
struct StepInfo {
    double t = 0.0;
    double dt = 0.0;
    double error = 0.0;
};

struct OdeStats {
    std::size_t accepted = 0;
    std::size_t rejected = 0;
    std::size_t rejected_inadmissible = 0;
    double last_dt = 0.0;
};

namespace detail {

inline void rk4_step(const Rhs& f, std::span<const double> y, double h, std::span<double> out, std::vector<double>& k1,
                     std::vector<double>& k2, std::vector<double>& k3, std::vector<double>& k4, std::vector<double>& tmp,
                     bool have_k1 = false)
{
    const std::size_t n = y.size();
    if (!have_k1) f(y, k1);
    for (std::size_t i = 0; i < n; ++i) tmp[i] = y[i] + 0.5 * h * k1[i];
    f(tmp, k2);
    for (std::size_t i = 0; i < n; ++i) tmp[i] = y[i] + 0.5 * h * k2[i];
    f(tmp, k3);
    for (std::size_t i = 0; i < n; ++i) tmp[i] = y[i] + h * k3[i];
    f(tmp, k4);
    for (std::size_t i = 0; i < n; ++i) out[i] = y[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
}

} // namespace detail

/// Classical RK4 with step-doubling error control.
///
/// A step of size h is compared with two steps of size h/2; the error
/// estimate is max_i |y_half - y_full| / (15 (1 + |y_i|)). The two-half-step
/// result is kept. A step whose result fails `admissible(new, old)` is
/// rejected and retried with half the step; nothing is ever clipped.
/// `observe(t, y, info)` is called after every accepted step and once at t=0
/// (with dt = 0).
class AdaptiveRk4 {
public:
    using Admissible = std::function<bool(std::span<const double> next, std::span<const double> prev)>;
    using Observer = std::function<void(double t, std::span<const double> y, const StepInfo& info)>;

    AdaptiveRk4(SolverConfig cfg) : cfg_(cfg) { cfg_.validate(); }

    OdeStats run(std::vector<double>& y, double t0, double t1, const Rhs& f, const Admissible& admissible = {},
                 const Observer& observe = {}, const std::vector<double>& stop_times = {})
    {
        const std::size_t n = y.size();
        std::vector<double> k1(n), k2(n), k3(n), k4(n), tmp(n), full(n), half(n), half2(n), f0(n);
        OdeStats st;
        double t = t0;
        double h = std::min(cfg_.dt, cfg_.dt_max);
        if (observe) observe(t, y, StepInfo{t, 0.0, 0.0});
        std::size_t next_stop = 0;
        while (t < t1 - 1e-14 * std::max(1.0, std::abs(t1))) {
            while (next_stop < stop_times.size() && stop_times[next_stop] <= t + 1e-14 * std::max(1.0, std::abs(t)))
                ++next_stop;
            double target = t1;
            if (next_stop < stop_times.size()) target = std::min(target, stop_times[next_stop]);
            bool clipped = false;
            double hs = h;
            if (t + hs >= target - 1e-14 * std::max(1.0, std::abs(target))) {
                hs = target - t;
                clipped = true;
            }
            int tries = 0;
            f(y, f0);
            for (;;) {
                // the full step and the first half step share f(y)
                k1 = f0;
                detail::rk4_step(f, y, hs, full, k1, k2, k3, k4, tmp, true);
                k1 = f0;
                detail::rk4_step(f, y, 0.5 * hs, half, k1, k2, k3, k4, tmp, true);
                detail::rk4_step(f, half, 0.5 * hs, half2, k1, k2, k3, k4, tmp);
                double err = 0.0;
                bool finite = true;
                for (std::size_t i = 0; i < n; ++i) {
                    if (!std::isfinite(half2[i]) || !std::isfinite(full[i])) finite = false;
                    err = std::max(err, std::abs(half2[i] - full[i]) / (1.0 + std::abs(half2[i])));
                }
                err /= 15.0;
                const double ratio = finite ? err / cfg_.tolerance : INFINITY;
                const bool ok_err = ratio <= 1.0;
                const bool ok_adm = finite && (!admissible || admissible(half2, y));
                if (ok_err && ok_adm) {
                    t = clipped ? target : t + hs;
                    y.swap(half2);
                    ++st.accepted;
                    st.last_dt = hs;
                    if (observe) observe(t, y, StepInfo{t, hs, err});
                    const double grow = ratio > 0.0 ? std::clamp(0.9 * std::pow(ratio, -0.2), 0.2, 2.0) : 2.0;
                    // a step shortened to hit a stop time says nothing about h
                    if (!clipped || hs >= h) h = std::min(h * grow, cfg_.dt_max);
                    break;
                }
                ++st.rejected;
                if (!ok_adm) ++st.rejected_inadmissible;
                const double shrink = ok_err ? 0.5 : std::clamp(0.9 * std::pow(ratio, -0.2), 0.2, 0.5);
                hs *= shrink;
                h = hs;
                clipped = false;
                if (hs < cfg_.dt_min || ++tries > cfg_.max_rejections)
                    throw NumericalFault(std::string(ok_adm ? "step size" : "admissibility") + " failure at t="
                                             + std::to_string(t) + ": step fell below dt_min",
                                         y, t);
            }
        }
        return st;
    }

private:
    SolverConfig cfg_;
};

/// Snapshot times t0, t0+every, ..., t1 (always including t1).
inline std::vector<double> snapshot_times(double t0, double t1, double every)
{
    std::vector<double> out;
    if (every > 0.0) {
        const auto n = static_cast<std::size_t>(std::floor((t1 - t0) / every + 1e-9));
        for (std::size_t i = 1; i <= n; ++i) out.push_back(t0 + static_cast<double>(i) * every);
    }
    if (out.empty() || out.back() < t1 - 1e-12 * std::max(1.0, t1)) out.push_back(t1);
    else out.back() = t1;
    return out;
}

} // namespace qkin

#endif // QKIN_ODE_HPP
