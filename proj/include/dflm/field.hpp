#pragma once

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "dflm/core.hpp"
#include "dflm/rng.hpp"

namespace dflm {

/// Coefficient value with its partial derivatives at one (x, u).
struct FieldEval {
    double a = 0.0;
    Point2 grad_a_x{};  ///< spatial gradient at fixed u
    double da_du = 0.0; ///< zero for linear models
};

namespace detail {
inline void require_positive_eps(double eps) {
    if (!(eps > 0.0)) throw std::invalid_argument("coefficient: eps must be > 0");
}
} // namespace detail

/// base + amplitude * sin(2 pi x1 / eps) * cos(2 pi x2 / eps), with analytic gradient.
inline FieldEval eval_periodic(const Point2& x, double eps, double base = 1.0, double amplitude = 0.9) {
    detail::require_positive_eps(eps);
    const double w = kTwoPi / eps;
    const double s1 = std::sin(w * x[0]);
    const double c1 = std::cos(w * x[0]);
    const double s2 = std::sin(w * x[1]);
    const double c2 = std::cos(w * x[1]);
    FieldEval out;
    out.a = base + amplitude * s1 * c2;
    out.grad_a_x = {amplitude * w * c1 * c2, -amplitude * w * s1 * s2};
    out.da_du = 0.0;
    return out;
}

/// a(x, u) = 1 + alpha(x) u^2 with alpha the periodic field.
inline FieldEval eval_nonlinear(const Point2& x, double u, double eps, double base = 1.0, double amplitude = 0.9) {
    const FieldEval alpha = eval_periodic(x, eps, base, amplitude);
    const double u2 = u * u;
    FieldEval out;
    out.a = 1.0 + alpha.a * u2;
    out.grad_a_x = {u2 * alpha.grad_a_x[0], u2 * alpha.grad_a_x[1]};
    out.da_du = 2.0 * alpha.a * u;
    return out;
}

// ---------------------------------------------------------------------------
// Random Fourier field

struct RandomFieldParams {
    std::uint64_t seed = 0;
    int kmax = 64;
    double decay_exp = 1.0;
    double offset = 1.0;
    double scale = 0.9;
};

/// One half-plane Fourier mode: cos_coef * cos(2 pi k.x) + sin_coef * sin(2 pi k.x).
struct FourierMode {
    int k1 = 0;
    int k2 = 0;
    double cos_coef = 0.0;
    double sin_coef = 0.0;
};

/// Values and gradients sampled on a tensor grid xs (x1) by ys (x2); index j * nx + i.
struct TensorSamples {
    std::size_t nx = 0;
    std::size_t ny = 0;
    std::vector<double> a;
    std::vector<double> a_x1;
    std::vector<double> a_x2;
};

/// Periodic table of (a, da/dx1, da/dx2) on nodes i/n of the unit torus, read back by
/// bilinear interpolation. Used where the full Fourier sum is too expensive per point.
struct FieldTable {
    std::size_t n = 0;
    std::vector<double> a;
    std::vector<double> a_x1;
    std::vector<double> a_x2;

    FieldEval operator()(const Point2& x) const {
        const double gx = x[0] * static_cast<double>(n);
        const double gy = x[1] * static_cast<double>(n);
        const double fx = std::floor(gx);
        const double fy = std::floor(gy);
        const double tx = gx - fx;
        const double ty = gy - fy;
        const auto wrap = [this](double v) {
            auto m = static_cast<long long>(v) % static_cast<long long>(n);
            if (m < 0) m += static_cast<long long>(n);
            return static_cast<std::size_t>(m);
        };
        const std::size_t i0 = wrap(fx);
        const std::size_t j0 = wrap(fy);
        const std::size_t i1 = (i0 + 1) % n;
        const std::size_t j1 = (j0 + 1) % n;
        const double w00 = (1 - tx) * (1 - ty), w10 = tx * (1 - ty), w01 = (1 - tx) * ty, w11 = tx * ty;
        const auto lerp = [&](const std::vector<double>& v) {
            return w00 * v[j0 * n + i0] + w10 * v[j0 * n + i1] + w01 * v[j1 * n + i0] + w11 * v[j1 * n + i1];
        };
        FieldEval out;
        out.a = lerp(a);
        out.grad_a_x = {lerp(a_x1), lerp(a_x2)};
        return out;
    }
};

/// Truncated 2-D Fourier series F(x) = sum_{0<|k|<=kmax} |k|^-p (xi_k cos 2pi k.x + eta_k sin 2pi k.x)
/// with i.i.d. standard normal xi, eta, affinely rescaled so that F spans [-1, 1] on a
/// 512^2 scan grid; the coefficient is offset + scale * rescaled F. Immutable once built.
class RandomField {
public:
    static constexpr std::size_t kScanGrid = 512;
    static constexpr double kMinCoefficient = 0.05;

    explicit RandomField(const RandomFieldParams& params) : params_(params) {
        if (params.kmax < 1) throw std::invalid_argument("build_random_field: kmax must be >= 1");
        if (!std::isfinite(params.decay_exp)) throw std::invalid_argument("build_random_field: decay_exp must be finite");
        RngStream rng(params.seed, 0, StreamTag::RandomField);
        const int kmax = params.kmax;
        for (int k1 = 0; k1 <= kmax; ++k1) {
            for (int k2 = -kmax; k2 <= kmax; ++k2) {
                if (k1 == 0 && k2 <= 0) continue;
                const int r2 = k1 * k1 + k2 * k2;
                if (r2 > kmax * kmax) continue;
                const double amp = std::pow(std::sqrt(static_cast<double>(r2)), -params.decay_exp);
                const auto z = rng.normal_pair();
                modes_.push_back({k1, k2, amp * z[0], amp * z[1]});
            }
        }

        // Empirical rescale on the scan grid.
        std::vector<double> nodes(kScanGrid);
        for (std::size_t i = 0; i < kScanGrid; ++i) nodes[i] = static_cast<double>(i) / kScanGrid;
        const TensorSamples raw = raw_tensor(nodes, nodes, false);
        const auto [mn, mx] = std::minmax_element(raw.a.begin(), raw.a.end());
        raw_min_ = *mn;
        raw_max_ = *mx;
        if (!(raw_max_ > raw_min_)) throw std::invalid_argument("build_random_field: degenerate field");
        slope_ = 2.0 * params_.scale / (raw_max_ - raw_min_);
        intercept_ = params_.offset - params_.scale - slope_ * raw_min_;

        const double min_a = intercept_ + slope_ * raw_min_;
        if (!(min_a > kMinCoefficient)) {
            throw std::domain_error("build_random_field: minimum coefficient " + std::to_string(min_a) +
                                    " <= " + std::to_string(kMinCoefficient) + " on the scan grid");
        }
    }

    const RandomFieldParams& params() const { return params_; }
    const std::vector<FourierMode>& modes() const { return modes_; }

    /// Affine map raw F -> a.
    double slope() const { return slope_; }
    double intercept() const { return intercept_; }

    /// Unscaled series value F(x) and gradient by term-wise differentiation.
    FieldEval raw(const Point2& x) const {
        double v = 0.0, g1 = 0.0, g2 = 0.0;
        for (const auto& m : modes_) {
            const double theta = kTwoPi * (m.k1 * x[0] + m.k2 * x[1]);
            const double c = std::cos(theta);
            const double s = std::sin(theta);
            v += m.cos_coef * c + m.sin_coef * s;
            const double d = kTwoPi * (m.sin_coef * c - m.cos_coef * s);
            g1 += m.k1 * d;
            g2 += m.k2 * d;
        }
        FieldEval out;
        out.a = v;
        out.grad_a_x = {g1, g2};
        return out;
    }

    FieldEval operator()(const Point2& x) const {
        FieldEval r = raw(x);
        r.a = intercept_ + slope_ * r.a;
        r.grad_a_x = {slope_ * r.grad_a_x[0], slope_ * r.grad_a_x[1]};
        return r;
    }

    /// Coefficient and gradient on the tensor grid xs x ys via separable synthesis
    /// (cost nx * ny * (kmax + 1) instead of nx * ny * #modes).
    TensorSamples tensor(const std::vector<double>& xs, const std::vector<double>& ys, bool with_gradient = true) const {
        TensorSamples t = raw_tensor(xs, ys, with_gradient);
        for (auto& v : t.a) v = intercept_ + slope_ * v;
        for (auto& v : t.a_x1) v *= slope_;
        for (auto& v : t.a_x2) v *= slope_;
        return t;
    }

    FieldTable tabulate(std::size_t n) const {
        if (n < 4) throw std::invalid_argument("RandomField::tabulate: n must be >= 4");
        std::vector<double> nodes(n);
        for (std::size_t i = 0; i < n; ++i) nodes[i] = static_cast<double>(i) / static_cast<double>(n);
        TensorSamples t = tensor(nodes, nodes, true);
        return FieldTable{n, std::move(t.a), std::move(t.a_x1), std::move(t.a_x2)};
    }

private:
    TensorSamples raw_tensor(const std::vector<double>& xs, const std::vector<double>& ys, bool with_gradient) const {
        const int kmax = params_.kmax;
        const std::size_t nk1 = static_cast<std::size_t>(kmax) + 1;
        const std::size_t nk2 = 2 * static_cast<std::size_t>(kmax) + 1;
        const std::size_t nx = xs.size(), ny = ys.size();

        // Complex coefficient (cos_coef - i sin_coef) per (k1, k2 + kmax).
        std::vector<double> cre(nk1 * nk2, 0.0), cim(nk1 * nk2, 0.0);
        for (const auto& m : modes_) {
            const std::size_t idx = static_cast<std::size_t>(m.k1) * nk2 + static_cast<std::size_t>(m.k2 + kmax);
            cre[idx] = m.cos_coef;
            cim[idx] = -m.sin_coef;
        }

        // S0(k1, j) = sum_k2 C e^{2 pi i k2 y_j};  S2 = same with factor 2 pi i k2.
        std::vector<double> s0re(nk1 * ny), s0im(nk1 * ny), s2re(nk1 * ny), s2im(nk1 * ny);
        std::vector<double> e2re(nk2), e2im(nk2);
        for (std::size_t j = 0; j < ny; ++j) {
            for (std::size_t q = 0; q < nk2; ++q) {
                const double th = kTwoPi * (static_cast<int>(q) - kmax) * ys[j];
                e2re[q] = std::cos(th);
                e2im[q] = std::sin(th);
            }
            for (std::size_t k1 = 0; k1 < nk1; ++k1) {
                double r0 = 0, i0 = 0, r2 = 0, i2 = 0;
                for (std::size_t q = 0; q < nk2; ++q) {
                    const std::size_t idx = k1 * nk2 + q;
                    const double pr = cre[idx] * e2re[q] - cim[idx] * e2im[q];
                    const double pi = cre[idx] * e2im[q] + cim[idx] * e2re[q];
                    r0 += pr;
                    i0 += pi;
                    const double k2 = kTwoPi * (static_cast<int>(q) - kmax);
                    // (i k2) * (pr + i pi) = -k2 pi + i k2 pr
                    r2 += -k2 * pi;
                    i2 += k2 * pr;
                }
                s0re[k1 * ny + j] = r0;
                s0im[k1 * ny + j] = i0;
                s2re[k1 * ny + j] = r2;
                s2im[k1 * ny + j] = i2;
            }
        }

        TensorSamples out;
        out.nx = nx;
        out.ny = ny;
        out.a.assign(nx * ny, 0.0);
        if (with_gradient) {
            out.a_x1.assign(nx * ny, 0.0);
            out.a_x2.assign(nx * ny, 0.0);
        }
        std::vector<double> e1re(nk1), e1im(nk1);
        for (std::size_t i = 0; i < nx; ++i) {
            for (std::size_t k1 = 0; k1 < nk1; ++k1) {
                const double th = kTwoPi * static_cast<double>(k1) * xs[i];
                e1re[k1] = std::cos(th);
                e1im[k1] = std::sin(th);
            }
            for (std::size_t j = 0; j < ny; ++j) {
                double v = 0, d1 = 0, d2 = 0;
                for (std::size_t k1 = 0; k1 < nk1; ++k1) {
                    const double ar = s0re[k1 * ny + j], ai = s0im[k1 * ny + j];
                    const double pr = ar * e1re[k1] - ai * e1im[k1];
                    v += pr;
                    if (with_gradient) {
                        const double pi = ar * e1im[k1] + ai * e1re[k1];
                        d1 += -kTwoPi * static_cast<double>(k1) * pi;
                        d2 += s2re[k1 * ny + j] * e1re[k1] - s2im[k1 * ny + j] * e1im[k1];
                    }
                }
                out.a[j * nx + i] = v;
                if (with_gradient) {
                    out.a_x1[j * nx + i] = d1;
                    out.a_x2[j * nx + i] = d2;
                }
            }
        }
        return out;
    }

    RandomFieldParams params_;
    std::vector<FourierMode> modes_;
    double raw_min_ = 0.0;
    double raw_max_ = 0.0;
    double slope_ = 1.0;
    double intercept_ = 0.0;
};

inline RandomField build_random_field(std::uint64_t seed, int kmax, double decay_exp, double offset = 1.0,
                                      double scale = 0.9) {
    return RandomField(RandomFieldParams{seed, kmax, decay_exp, offset, scale});
}

inline FieldEval eval_random_field(const RandomField& field, const Point2& x) { return field(x); }

// ---------------------------------------------------------------------------
// Correlation length

/// 1/e-crossing lengths of the autocorrelation along x1 and x2 for a periodic sample
/// grid (values[j * n + i] at (i/n, j/n)), each averaged over the perpendicular rows or
/// columns. The crossing lag is linearly interpolated.
inline std::array<double, 2> correlation_lengths_by_axis(const std::vector<double>& values, std::size_t n) {
    if (values.size() != n * n) throw std::invalid_argument("correlation_length: grid size mismatch");
    double mean = 0.0;
    for (double v : values) mean += v;
    mean /= static_cast<double>(values.size());
    std::vector<double> c(values.size());
    for (std::size_t k = 0; k < values.size(); ++k) c[k] = values[k] - mean;

    const auto autocov = [&](std::size_t lag, int axis) {
        double s = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            for (std::size_t i = 0; i < n; ++i) {
                const std::size_t ii = axis == 0 ? (i + lag) % n : i;
                const std::size_t jj = axis == 1 ? (j + lag) % n : j;
                s += c[j * n + i] * c[jj * n + ii];
            }
        }
        return s / static_cast<double>(n * n);
    };

    const double threshold = std::exp(-1.0);
    std::array<double, 2> out{};
    for (int axis = 0; axis < 2; ++axis) {
        const double c0 = autocov(0, axis);
        if (!(c0 > 0.0)) throw std::domain_error("correlation_length: field has zero variance");
        double prev = 1.0;
        bool found = false;
        for (std::size_t lag = 1; lag <= n / 2; ++lag) {
            const double r = autocov(lag, axis) / c0;
            if (r < threshold) {
                const double frac = (prev - threshold) / (prev - r);
                out[static_cast<std::size_t>(axis)] = (static_cast<double>(lag - 1) + frac) / static_cast<double>(n);
                found = true;
                break;
            }
            prev = r;
        }
        if (!found) {
            throw std::domain_error("correlation_length: autocorrelation never drops below 1/e within half the domain");
        }
    }
    return out;
}

inline double correlation_length_of_grid(const std::vector<double>& values, std::size_t n) {
    const auto l = correlation_lengths_by_axis(values, n);
    return 0.5 * (l[0] + l[1]);
}

inline double correlation_length(const RandomField& field, std::size_t grid_n) {
    if (grid_n < 256) throw std::invalid_argument("correlation_length: grid_n must be >= 256");
    std::vector<double> nodes(grid_n);
    for (std::size_t i = 0; i < grid_n; ++i) nodes[i] = static_cast<double>(i) / static_cast<double>(grid_n);
    return correlation_length_of_grid(field.tensor(nodes, nodes, false).a, grid_n);
}

// ---------------------------------------------------------------------------
// Coefficient models

struct ConstantCoefficient {
    double value = 1.0;
    static constexpr bool nonlinear = false;
    FieldEval operator()(const Point2&, double = 0.0) const { return {value, {0.0, 0.0}, 0.0}; }
};

struct PeriodicLinear {
    double eps = 0.05;
    double base = 1.0;
    double amplitude = 0.9;
    static constexpr bool nonlinear = false;
    FieldEval operator()(const Point2& x, double = 0.0) const { return eval_periodic(x, eps, base, amplitude); }
};

/// a = 1 + alpha(x) u^2 with alpha = base + amplitude * sin cos.
struct NonlinearPeriodic {
    double eps = 0.05;
    double base = 1.0;
    double amplitude = 0.9;
    static constexpr bool nonlinear = true;
    FieldEval operator()(const Point2& x, double u) const { return eval_nonlinear(x, u, eps, base, amplitude); }
    PeriodicLinear alpha() const { return {eps, base, amplitude}; }
};

/// Random field coefficient; evaluates through the table when one is attached.
struct RandomFieldCoefficient {
    std::shared_ptr<const RandomField> field;
    std::shared_ptr<const FieldTable> table;
    static constexpr bool nonlinear = false;
    FieldEval operator()(const Point2& x, double = 0.0) const { return table ? (*table)(x) : (*field)(x); }
};

using CoefficientModel = std::variant<ConstantCoefficient, PeriodicLinear, NonlinearPeriodic, RandomFieldCoefficient>;

inline bool is_nonlinear(const CoefficientModel& m) {
    return std::visit([](const auto& c) { return std::decay_t<decltype(c)>::nonlinear; }, m);
}

inline FieldEval evaluate(const CoefficientModel& m, const Point2& x, double u = 0.0) {
    return std::visit([&](const auto& c) { return c(x, u); }, m);
}

/// Minimum of a(x, u) over an n x n node grid of the unit square.
inline double min_coefficient(const CoefficientModel& m, std::size_t n, double u = 0.0) {
    double mn = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j) {
        for (std::size_t i = 0; i < n; ++i) {
            const Point2 x{static_cast<double>(i) / static_cast<double>(n - 1),
                           static_cast<double>(j) / static_cast<double>(n - 1)};
            mn = std::min(mn, evaluate(m, x, u).a);
        }
    }
    return mn;
}

// ---------------------------------------------------------------------------
// Force and boundary data

/// Closed-form scalar data used for forces and boundary values.
struct ScalarExpr {
    enum class Kind { Constant, SineWave, X1, Saddle, SquaredNorm };
    Kind kind = Kind::Constant;
    double value = 0.0; ///< constant value, or amplitude for SineWave

    double operator()(const Point2& x) const {
        switch (kind) {
        case Kind::Constant: return value;
        case Kind::SineWave: return value * std::sin(2.0 * kTwoPi * x[0] + 3.0 * kTwoPi * x[1] * x[1]);
        case Kind::X1: return x[0];
        case Kind::Saddle: return x[0] * x[0] - x[1] * x[1];
        case Kind::SquaredNorm: return x[0] * x[0] + x[1] * x[1];
        }
        return 0.0;
    }

    bool is_constant() const { return kind == Kind::Constant; }

    /// Name used in config files; constants are written as plain numbers instead.
    std::string name() const {
        switch (kind) {
        case Kind::Constant: {
            char buf[32];
            const auto r = std::to_chars(buf, buf + sizeof(buf), value);
            return std::string(buf, r.ptr);
        }
        case Kind::SineWave: return "sine_wave";
        case Kind::X1: return "x1";
        case Kind::Saddle: return "x1^2-x2^2";
        case Kind::SquaredNorm: return "|x|^2";
        }
        return "";
    }

    static ScalarExpr constant(double v) { return {Kind::Constant, v}; }

    /// Parses a number or a named expression: "sine_wave" (amplitude 100), "x1",
    /// "x1^2-x2^2", "|x|^2", "zero".
    static ScalarExpr parse(const std::string& s) {
        double v = 0.0;
        if (const auto r = std::from_chars(s.data(), s.data() + s.size(), v); r.ec == std::errc{} && r.ptr == s.data() + s.size()) {
            return constant(v);
        }
        if (s == "sine_wave") return {Kind::SineWave, 100.0};
        if (s == "x1") return {Kind::X1, 0.0};
        if (s == "x1^2-x2^2") return {Kind::Saddle, 0.0};
        if (s == "|x|^2") return {Kind::SquaredNorm, 0.0};
        if (s == "zero") return constant(0.0);
        throw std::invalid_argument("unknown scalar expression '" + s + "'");
    }
};

enum class ExperimentId { LinearPeriodic, NonlinearPeriodic, RandomField, MicroStepTest };

inline ExperimentId parse_experiment_id(const std::string& s) {
    if (s == "linear_periodic") return ExperimentId::LinearPeriodic;
    if (s == "nonlinear_periodic") return ExperimentId::NonlinearPeriodic;
    if (s == "random_field") return ExperimentId::RandomField;
    if (s == "microstep_test") return ExperimentId::MicroStepTest;
    throw std::invalid_argument("unknown experiment id '" + s + "'");
}

struct ForceAndBoundary {
    ScalarExpr f;
    ScalarExpr g;
};

inline ForceAndBoundary force_and_boundary(ExperimentId id) {
    switch (id) {
    case ExperimentId::LinearPeriodic: return {ScalarExpr::constant(10.0), ScalarExpr::constant(0.0)};
    case ExperimentId::NonlinearPeriodic: return {ScalarExpr::constant(50.0), ScalarExpr::constant(0.0)};
    case ExperimentId::RandomField: return {{ScalarExpr::Kind::SineWave, 100.0}, ScalarExpr::constant(0.0)};
    case ExperimentId::MicroStepTest: return {ScalarExpr::constant(10.0), ScalarExpr::constant(0.0)};
    }
    throw std::invalid_argument("unknown experiment id");
}

inline ForceAndBoundary force_and_boundary(const std::string& spec_id) {
    return force_and_boundary(parse_experiment_id(spec_id));
}

} // namespace dflm
