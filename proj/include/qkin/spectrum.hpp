#ifndef QKIN_SPECTRUM_HPP
#define QKIN_SPECTRUM_HPP

#include <functional>
#include <map>
#include <sstream>

#include "core.hpp"

namespace qkin {

/// Even real function of a momentum difference: the disorder power spectrum
/// of the linear operator, or the pair-potential transform of the
/// Uehling-Uhlenbeck operator.
///
/// Gaussian form: a exp(-|q|^2 / (2 w^2)) in the continuum; on the torus the
/// periodic analogue a exp(-sum_j (1 - cos q_j) / w^2), which agrees with the
/// continuum form for small q.
class Spectrum {
public:
    enum class Kind { Constant, Gaussian, Custom };

    static Spectrum constant(double value)
    {
        Spectrum s;
        s.kind_ = Kind::Constant;
        s.a_ = value;
        return s;
    }
    static Spectrum gaussian(double amplitude, double width)
    {
        if (!(width > 0.0)) throw DomainError("gaussian spectrum width must be positive");
        Spectrum s;
        s.kind_ = Kind::Gaussian;
        s.a_ = amplitude;
        s.w_ = width;
        return s;
    }
    /// f must be even; `label` is used in reports.
    static Spectrum custom(std::function<double(const Vec&, bool on_torus)> f, std::string label = "custom")
    {
        Spectrum s;
        s.kind_ = Kind::Custom;
        s.f_ = std::move(f);
        s.label_ = std::move(label);
        return s;
    }

    /// Parses "constant:v=1" or "gaussian:a=1,w=1"; a bare number is a
    /// constant.
    static Spectrum parse(const std::string& text)
    {
        const auto colon = text.find(':');
        const std::string name = text.substr(0, colon);
        std::map<std::string, double> kv;
        if (colon != std::string::npos) {
            std::stringstream ss(text.substr(colon + 1));
            std::string item;
            while (std::getline(ss, item, ',')) {
                const auto eq = item.find('=');
                if (eq == std::string::npos) throw ConfigError("spectrum parameter '" + item + "' is not key=value");
                try {
                    kv[item.substr(0, eq)] = std::stod(item.substr(eq + 1));
                } catch (const std::exception&) {
                    throw ConfigError("spectrum parameter '" + item + "' is not numeric");
                }
            }
        }
        auto take = [&](const std::string& key, double def) {
            auto it = kv.find(key);
            if (it == kv.end()) return def;
            const double v = it->second;
            kv.erase(it);
            return v;
        };
        Spectrum s;
        if (name == "constant") {
            s = constant(take("v", 1.0));
        } else if (name == "gaussian") {
            const double a = take("a", 1.0), w = take("w", 1.0);
            if (!(w > 0.0)) throw ConfigError("gaussian spectrum width must be positive");
            s = gaussian(a, w);
        } else {
            char* end = nullptr;
            const double v = std::strtod(text.c_str(), &end);
            if (end == text.c_str() || *end != '\0')
                throw ConfigError("unknown spectrum '" + text + "' (expected constant:v=.. or gaussian:a=..,w=..)");
            return constant(v);
        }
        if (!kv.empty()) throw ConfigError("unknown spectrum parameter '" + kv.begin()->first + "' in '" + text + "'");
        return s;
    }

    double operator()(const Vec& q, bool on_torus) const
    {
        switch (kind_) {
        case Kind::Constant: return a_;
        case Kind::Gaussian: {
            if (on_torus) {
                const double s = (1.0 - std::cos(q[0])) + (1.0 - std::cos(q[1])) + (1.0 - std::cos(q[2]));
                return a_ * std::exp(-s / (w_ * w_));
            }
            return a_ * std::exp(-0.5 * norm2(q) / (w_ * w_));
        }
        case Kind::Custom: return f_(q, on_torus);
        }
        return 0.0;
    }

    Spectrum scaled(double lambda) const
    {
        Spectrum s = *this;
        if (kind_ == Kind::Custom) {
            auto f = f_;
            s.f_ = [f, lambda](const Vec& q, bool t) { return lambda * f(q, t); };
        } else {
            s.a_ *= lambda;
        }
        return s;
    }

    Kind kind() const { return kind_; }
    bool is_constant() const { return kind_ == Kind::Constant; }
    double amplitude() const { return a_; }
    double width() const { return w_; }

    std::string describe() const
    {
        std::ostringstream os;
        os.precision(17);
        switch (kind_) {
        case Kind::Constant: os << "constant:v=" << a_; break;
        case Kind::Gaussian: os << "gaussian:a=" << a_ << ",w=" << w_; break;
        case Kind::Custom: os << label_; break;
        }
        return os.str();
    }

private:
    Kind kind_ = Kind::Constant;
    double a_ = 1.0;
    double w_ = 1.0;
    std::function<double(const Vec&, bool)> f_;
    std::string label_;
};

using PotentialSpectrum = Spectrum;
using PairPotential = Spectrum;

} // namespace qkin

#endif // QKIN_SPECTRUM_HPP
