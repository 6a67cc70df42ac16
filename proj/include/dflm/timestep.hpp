#pragma once

#include <cmath>
#include <optional>
#include <stdexcept>
#include <string>

namespace dflm {

/// Mean Euclidean norm of a standard normal vector in d dimensions,
/// E|Z| = sqrt(2) * Gamma((d+1)/2) / Gamma(d/2).
inline double kappa(int d) {
    if (d < 1) throw std::invalid_argument("kappa: dimension must be >= 1");
    return std::sqrt(2.0) * std::exp(std::lgamma(0.5 * (d + 1)) - std::lgamma(0.5 * d));
}

/// Largest micro step whose mean Brownian displacement stays below eps/m0.
inline double micro_upper_bound(int m0, double eps, int d) {
    if (m0 < 1) throw std::invalid_argument("micro_upper_bound: m0 must be >= 1");
    if (!(eps > 0.0)) throw std::invalid_argument("micro_upper_bound: eps must be > 0");
    const double k = kappa(d);
    const double r = eps / m0;
    return r * r / (k * k);
}

/// Smallest macro step whose mean displacement reaches the circumradius of an eps-cell.
inline double macro_lower_bound(double eps, int d) {
    if (!(eps > 0.0)) throw std::invalid_argument("macro_lower_bound: eps must be > 0");
    const double k = kappa(d);
    return d * eps * eps / (4.0 * k * k);
}

/// Minimum number of micro steps per macro step, ceil(d * m0^2 / 4). Independent of eps.
inline int step_ratio(int m0, int d) {
    if (m0 < 1) throw std::invalid_argument("step_ratio: m0 must be >= 1");
    if (d < 1) throw std::invalid_argument("step_ratio: dimension must be >= 1");
    const long long num = static_cast<long long>(d) * m0 * m0;
    return static_cast<int>((num + 3) / 4);
}

struct TimeStepPlan {
    double delta_t = 0.0;  ///< micro step
    double Delta_t = 0.0;  ///< macro step, always K * delta_t
    int K = 1;
    int m0 = 1;
    double kappa_d = 0.0;
    int dim = 2;
    /// Set when K is below the eps-independent minimum ratio; the plan is still usable.
    std::optional<std::string> warning;
};

inline TimeStepPlan make_plan(double eps, int m0, int K, int d) {
    if (K < 1) throw std::invalid_argument("make_plan: K must be >= 1");
    TimeStepPlan plan;
    plan.delta_t = micro_upper_bound(m0, eps, d);
    plan.K = K;
    plan.Delta_t = K * plan.delta_t;
    plan.m0 = m0;
    plan.kappa_d = kappa(d);
    plan.dim = d;
    if (const int k0 = step_ratio(m0, d); K < k0) {
        plan.warning = "K=" + std::to_string(K) + " is below the minimum step ratio K0=" + std::to_string(k0) +
                       "; walkers may not cover an eps-cell per macro step";
    }
    return plan;
}

/// Plan with a prescribed macro step split into K equal micro steps.
inline TimeStepPlan plan_from_macro(double Delta_t, int K, int d) {
    if (!(Delta_t > 0.0)) throw std::invalid_argument("plan_from_macro: Delta_t must be > 0");
    if (K < 1) throw std::invalid_argument("plan_from_macro: K must be >= 1");
    TimeStepPlan plan;
    plan.delta_t = Delta_t / K;
    plan.K = K;
    plan.Delta_t = K * plan.delta_t;
    plan.m0 = 0;
    plan.kappa_d = kappa(d);
    plan.dim = d;
    return plan;
}

} // namespace dflm
