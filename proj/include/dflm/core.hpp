#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <numbers>
#include <stdexcept>
#include <string>

namespace dflm {

template <std::size_t Dim>
using Point = std::array<double, Dim>;

using Point2 = Point<2>;

inline constexpr double kTwoPi = 2.0 * std::numbers::pi;

/// Raised when a numerical quantity leaves the finite range (coefficient blow-up,
/// overflowing discount, diverging loss).
class NumericalError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Iterative method failed to reach its tolerance within the allowed iterations.
class ConvergenceError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Malformed or inconsistent configuration; messages name the offending field.
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Axis-aligned box domain [lower, upper] in Dim dimensions.
template <std::size_t Dim>
struct Box {
    Point<Dim> lower{};
    Point<Dim> upper{};

    static constexpr std::size_t dim() { return Dim; }

    static Box unit() {
        Box b;
        b.lower.fill(0.0);
        b.upper.fill(1.0);
        return b;
    }

    void validate() const {
        for (std::size_t i = 0; i < Dim; ++i) {
            if (!(lower[i] < upper[i])) {
                throw std::invalid_argument("Box: lower[" + std::to_string(i) + "] must be < upper");
            }
        }
    }

    /// Closed-box membership.
    bool contains(const Point<Dim>& x) const {
        for (std::size_t i = 0; i < Dim; ++i) {
            if (x[i] < lower[i] || x[i] > upper[i]) return false;
        }
        return true;
    }

    bool on_boundary(const Point<Dim>& x, double tol) const {
        if (!contains(x)) return false;
        for (std::size_t i = 0; i < Dim; ++i) {
            if (std::abs(x[i] - lower[i]) <= tol || std::abs(x[i] - upper[i]) <= tol) return true;
        }
        return false;
    }

    double extent(std::size_t i) const { return upper[i] - lower[i]; }
};

using Domain = Box<2>;

template <std::size_t Dim>
inline double dot(const Point<Dim>& a, const Point<Dim>& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < Dim; ++i) s += a[i] * b[i];
    return s;
}

template <std::size_t Dim>
inline double squared_norm(const Point<Dim>& a) {
    return dot(a, a);
}

template <std::size_t Dim>
inline bool all_finite(const Point<Dim>& a) {
    for (double v : a) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

} // namespace dflm
