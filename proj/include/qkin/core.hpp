#ifndef QKIN_CORE_HPP
#define QKIN_CORE_HPP

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdlib>
#include <numbers>
#include <numeric>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace qkin {

inline constexpr double pi = std::numbers::pi;
inline constexpr double two_pi = 2.0 * std::numbers::pi;

/// Wavevector / position with up to three components. Unused trailing
/// components are kept at zero so that dot products stay valid for d < 3.
using Vec = std::array<double, 3>;

inline Vec operator+(const Vec& a, const Vec& b) { return {a[0] + b[0], a[1] + b[1], a[2] + b[2]}; }
inline Vec operator-(const Vec& a, const Vec& b) { return {a[0] - b[0], a[1] - b[1], a[2] - b[2]}; }
inline Vec operator-(const Vec& a) { return {-a[0], -a[1], -a[2]}; }
inline Vec operator*(double s, const Vec& a) { return {s * a[0], s * a[1], s * a[2]}; }
inline double dot(const Vec& a, const Vec& b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }
inline double norm2(const Vec& a) { return dot(a, a); }
inline double norm(const Vec& a) { return std::sqrt(norm2(a)); }

/// Boson (+1), fermion (-1) or classical Boltzmann (0) statistics.
enum class Statistics : int { Fermion = -1, Boltzmann = 0, Boson = 1 };

inline double theta_of(Statistics s) { return static_cast<double>(static_cast<int>(s)); }

inline Statistics statistics_from_theta(int theta)
{
    if (theta == -1) return Statistics::Fermion;
    if (theta == 0) return Statistics::Boltzmann;
    if (theta == 1) return Statistics::Boson;
    throw std::invalid_argument("statistics theta must be -1, 0 or +1, got " + std::to_string(theta));
}

// Error hierarchy. Every failure a caller can act on has its own type; the
// CLI maps ConfigError to exit code 2 and everything else to exit code 1.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct DomainError : Error { using Error::Error; };
struct ContractViolation : Error { using Error::Error; };
struct InvalidSpectrum : Error { using Error::Error; };
struct EmptyShell : Error { using Error::Error; };
struct SizeError : Error { using Error::Error; };
struct CondensationError : Error { using Error::Error; };
struct InvariantViolation : Error { using Error::Error; };
struct DegenerateShell : Error { using Error::Error; };
struct BudgetExceeded : Error { using Error::Error; };
struct ConfigError : Error { using Error::Error; };

/// Numerical failure that carries the last admissible state for diagnostics.
struct NumericalFault : Error {
    NumericalFault(const std::string& what, std::vector<double> snapshot = {}, double time = 0.0)
        : Error(what), snapshot(std::move(snapshot)), time(time)
    {
    }
    std::vector<double> snapshot;
    double time;
};

inline void require(bool cond, const std::string& msg)
{
    if (!cond) throw ContractViolation(msg);
}

// ---------------------------------------------------------------------------
// Worker pool configuration. Results never depend on the worker count: every
// parallel loop writes disjoint outputs and reductions run in index order.

namespace detail {
inline unsigned& worker_count_ref()
{
    static unsigned count = [] {
        if (const char* env = std::getenv("QKIN_THREADS")) {
            const int v = std::atoi(env);
            if (v > 0) return static_cast<unsigned>(v);
        }
        const unsigned hw = std::thread::hardware_concurrency();
        return hw == 0 ? 1u : hw;
    }();
    return count;
}
} // namespace detail

inline unsigned worker_count() { return detail::worker_count_ref(); }
inline void set_worker_count(unsigned n) { detail::worker_count_ref() = n == 0 ? 1 : n; }

/// Runs fn(i) for i in [0, n) with a static contiguous partition.
template <class Fn>
void parallel_for(std::size_t n, Fn&& fn)
{
    const unsigned workers = std::min<std::size_t>(worker_count(), n == 0 ? 1 : n);
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::jthread> pool;
    pool.reserve(workers);
    std::vector<std::exception_ptr> errors(workers);
    for (unsigned w = 0; w < workers; ++w) {
        pool.emplace_back([&, w] {
            const std::size_t lo = n * w / workers;
            const std::size_t hi = n * (w + 1) / workers;
            try {
                for (std::size_t i = lo; i < hi; ++i) fn(i);
            } catch (...) {
                errors[w] = std::current_exception();
            }
        });
    }
    pool.clear();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

// ---------------------------------------------------------------------------
// Seeded random streams. A stream is identified by (master seed, purpose tag,
// index...) so any realization can be regenerated on its own.

inline std::uint64_t splitmix64(std::uint64_t x)
{
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline std::mt19937_64 make_stream(std::uint64_t master, std::uint64_t tag, std::uint64_t a = 0, std::uint64_t b = 0)
{
    std::uint64_t s = splitmix64(master);
    s = splitmix64(s ^ tag);
    s = splitmix64(s ^ a);
    s = splitmix64(s ^ (b + 0x632be59bd9b4e019ULL));
    return std::mt19937_64(s);
}

/// Pairwise summation; fixed association order for a given length.
inline double pairwise_sum(std::span<const double> v)
{
    if (v.size() <= 8) {
        double s = 0.0;
        for (double x : v) s += x;
        return s;
    }
    const std::size_t h = v.size() / 2;
    return pairwise_sum(v.first(h)) + pairwise_sum(v.subspan(h));
}

/// Gaussian smeared delta of unit mass and standard deviation eta.
inline double smeared_delta(double x, double eta)
{
    const double z = x / eta;
    return std::exp(-0.5 * z * z) / (std::sqrt(two_pi) * eta);
}

/// Ordinary least-squares line y = a + b x; returns slope, intercept and the
/// standard error of the slope.
struct LineFit {
    double slope = 0.0;
    double intercept = 0.0;
    double slope_stderr = 0.0;
};

inline LineFit fit_line(std::span<const double> x, std::span<const double> y)
{
    require(x.size() == y.size() && x.size() >= 2, "fit_line needs at least two points");
    const double n = static_cast<double>(x.size());
    const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
    const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
    double sxx = 0.0, sxy = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sxx += (x[i] - mx) * (x[i] - mx);
        sxy += (x[i] - mx) * (y[i] - my);
    }
    LineFit f;
    f.slope = sxy / sxx;
    f.intercept = my - f.slope * mx;
    if (x.size() > 2) {
        double ss = 0.0;
        for (std::size_t i = 0; i < x.size(); ++i) {
            const double r = y[i] - f.intercept - f.slope * x[i];
            ss += r * r;
        }
        f.slope_stderr = std::sqrt(ss / (n - 2.0) / sxx);
    }
    return f;
}

} // namespace qkin

#endif // QKIN_CORE_HPP
