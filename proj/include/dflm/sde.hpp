#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <optional>
#include <span>
#include <sstream>
#include <stdexcept>
#include <vector>

#include "dflm/core.hpp"
#include "dflm/parallel.hpp"
#include "dflm/rng.hpp"
#include "dflm/timestep.hpp"

namespace dflm {

enum class BoundaryKind : std::uint8_t { Dirichlet, Neumann };

/// Per-face boundary type; face 2*i is x_i = lower[i], face 2*i+1 is x_i = upper[i].
template <std::size_t Dim>
struct BoundaryConditions {
    std::array<BoundaryKind, 2 * Dim> faces{};
    bool exit_bridge = false; ///< also test for Dirichlet excursions between micro steps

    static BoundaryConditions all_dirichlet() {
        BoundaryConditions bc;
        bc.faces.fill(BoundaryKind::Dirichlet);
        return bc;
    }
};

template <std::size_t Dim>
struct RolloutOutcome {
    Point<Dim> terminal{};
    bool exited = false;
    std::optional<Point<Dim>> exit_point;
    std::optional<int> exit_step;
    double reward = 0.0;       ///< left-endpoint sum of G dt
    double log_discount = 0.0; ///< left-endpoint sum of V.dB - |V|^2 dt / 2
};

/// Evaluates drift V and reward rate G at a batch of positions.
template <class F, std::size_t Dim>
concept BatchIntegrand = requires(F& f, std::span<const Point<Dim>> xs, std::span<Point<Dim>> drift,
                                  std::span<double> rate) {
    { f(xs, drift, rate) };
};

/// Zero drift and zero reward.
template <std::size_t Dim>
struct NullIntegrand {
    void operator()(std::span<const Point<Dim>>, std::span<Point<Dim>> drift, std::span<double> rate) const {
        for (auto& v : drift) v.fill(0.0);
        std::fill(rate.begin(), rate.end(), 0.0);
    }
};

/// Adapts pointwise drift and reward callables to the batch interface.
template <std::size_t Dim, class DriftFn, class RewardFn>
struct PointwiseIntegrand {
    DriftFn drift_fn;
    RewardFn reward_fn;
    void operator()(std::span<const Point<Dim>> xs, std::span<Point<Dim>> drift, std::span<double> rate) const {
        for (std::size_t k = 0; k < xs.size(); ++k) {
            drift[k] = drift_fn(xs[k]);
            rate[k] = reward_fn(xs[k]);
        }
    }
};

template <std::size_t Dim, class DriftFn, class RewardFn>
PointwiseIntegrand<Dim, DriftFn, RewardFn> pointwise_integrand(DriftFn d, RewardFn r) {
    return {std::move(d), std::move(r)};
}

/// sqrt(delta_t) * Z with Z ~ N(0, I).
template <std::size_t Dim>
inline Point<Dim> brownian_increment(RngStream& rng, double delta_t) {
    if (!(delta_t > 0.0)) throw std::invalid_argument("brownian_increment: delta_t must be > 0");
    Point<Dim> z = standard_normal<Dim>(rng);
    const double s = std::sqrt(delta_t);
    for (auto& v : z) v *= s;
    return z;
}

struct FaceCrossing {
    double t = 0.0; ///< segment parameter in [0, 1]
    int face = -1;
};

/// First face crossed by the segment p_in -> p_out (p_in inside). Ties go to the
/// lower-indexed face.
template <std::size_t Dim>
std::optional<FaceCrossing> first_crossing(const Point<Dim>& p_in, const Point<Dim>& p_out, const Box<Dim>& domain) {
    std::optional<FaceCrossing> best;
    for (std::size_t i = 0; i < Dim; ++i) {
        const double delta = p_out[i] - p_in[i];
        double t = -1.0;
        int face = -1;
        if (p_out[i] < domain.lower[i]) {
            t = (domain.lower[i] - p_in[i]) / delta;
            face = static_cast<int>(2 * i);
        } else if (p_out[i] > domain.upper[i]) {
            t = (domain.upper[i] - p_in[i]) / delta;
            face = static_cast<int>(2 * i + 1);
        }
        if (face >= 0) {
            t = std::clamp(t, 0.0, 1.0);
            if (!best || t < best->t) best = FaceCrossing{t, face};
        }
    }
    return best;
}

template <std::size_t Dim>
Point<Dim> crossing_point(const Point<Dim>& p_in, const Point<Dim>& p_out, const FaceCrossing& c, const Box<Dim>& domain) {
    Point<Dim> x{};
    for (std::size_t i = 0; i < Dim; ++i) {
        x[i] = std::clamp(p_in[i] + c.t * (p_out[i] - p_in[i]), domain.lower[i], domain.upper[i]);
    }
    const auto axis = static_cast<std::size_t>(c.face / 2);
    x[axis] = (c.face % 2 == 0) ? domain.lower[axis] : domain.upper[axis];
    return x;
}

/// Intersection of the segment [p_in, p_out] with the boundary, at the smallest
/// crossing parameter.
template <std::size_t Dim>
Point<Dim> estimate_exit_point(const Point<Dim>& p_in, const Point<Dim>& p_out, const Box<Dim>& domain) {
    const auto c = first_crossing(p_in, p_out, domain);
    if (!c) throw std::invalid_argument("estimate_exit_point: p_out lies inside the domain");
    return crossing_point(p_in, p_out, *c, domain);
}

namespace detail {

enum class StepResult { Inside, Exited };

/// Moves a walker from p by dB. Dirichlet crossings stop at the boundary (exit_point
/// set); Neumann crossings mirror the remainder of the step back into the domain.
template <std::size_t Dim>
StepResult move_walker(Point<Dim>& p, const Point<Dim>& dB, const Box<Dim>& domain, const BoundaryConditions<Dim>& bc,
                       Point<Dim>& exit_point) {
    Point<Dim> q_out{};
    for (std::size_t i = 0; i < Dim; ++i) q_out[i] = p[i] + dB[i];
    if (domain.contains(q_out)) {
        p = q_out;
        return StepResult::Inside;
    }
    Point<Dim> q_in = p;
    for (int bounce = 0; bounce < 64; ++bounce) {
        const auto c = first_crossing(q_in, q_out, domain);
        if (!c) {
            p = q_out;
            return StepResult::Inside;
        }
        const Point<Dim> cp = crossing_point(q_in, q_out, *c, domain);
        if (bc.faces[static_cast<std::size_t>(c->face)] == BoundaryKind::Dirichlet) {
            exit_point = cp;
            p = cp;
            return StepResult::Exited;
        }
        const auto axis = static_cast<std::size_t>(c->face / 2);
        const double wall = (c->face % 2 == 0) ? domain.lower[axis] : domain.upper[axis];
        q_out[axis] = 2.0 * wall - q_out[axis];
        q_in = cp;
        if (domain.contains(q_out)) {
            p = q_out;
            return StepResult::Inside;
        }
    }
    throw NumericalError("move_walker: reflection did not terminate (step much larger than domain?)");
}

/// Brownian-bridge test for an excursion through a Dirichlet face between two inside
/// points: the path crossed the face with probability exp(-2 d0 d1 / delta_t). Uniforms
/// are drawn only when that probability is non-negligible.
template <std::size_t Dim>
StepResult bridge_exit(const Point<Dim>& a, const Point<Dim>& b, double delta_t, const Box<Dim>& domain,
                       const BoundaryConditions<Dim>& bc, RngStream& rng, Point<Dim>& exit_point) {
    for (std::size_t f = 0; f < 2 * Dim; ++f) {
        if (bc.faces[f] != BoundaryKind::Dirichlet) continue;
        const std::size_t axis = f / 2;
        const double wall = (f % 2 == 0) ? domain.lower[axis] : domain.upper[axis];
        const double e = 2.0 * std::abs(a[axis] - wall) * std::abs(b[axis] - wall) / delta_t;
        if (e > 40.0) continue;
        if (rng.uniform() < std::exp(-e)) {
            for (std::size_t i = 0; i < Dim; ++i) exit_point[i] = 0.5 * (a[i] + b[i]);
            exit_point[axis] = wall;
            return StepResult::Exited;
        }
    }
    return StepResult::Inside;
}

template <std::size_t Dim>
[[noreturn]] void throw_non_finite(const Point<Dim>& x, const Point<Dim>& drift, double rate) {
    std::ostringstream os;
    os << "non-finite integrand at x=(";
    for (std::size_t i = 0; i < Dim; ++i) os << (i ? "," : "") << x[i];
    os << "): drift=(";
    for (std::size_t i = 0; i < Dim; ++i) os << (i ? "," : "") << drift[i];
    os << "), reward=" << rate << " (coefficient near zero?)";
    throw NumericalError(os.str());
}

} // namespace detail

/// Walks a batch of walkers in lockstep for up to max_steps micro steps of size
/// delta_t (the macro horizon when max_steps = K). The integrand is queried once per
/// step for all still-active walkers at their left-endpoint positions. Integrals of
/// walkers that exit are frozen before the exit step. Per-walker results depend only
/// on that walker's start and stream, never on batch composition.
template <std::size_t Dim, class Integrand>
    requires BatchIntegrand<Integrand, Dim>
void simulate_batch(std::span<const Point<Dim>> starts, std::span<RngStream> rngs, double delta_t, long max_steps,
                    const Box<Dim>& domain, const BoundaryConditions<Dim>& bc, Integrand& integrand,
                    std::span<RolloutOutcome<Dim>> out) {
    const std::size_t n = starts.size();
    if (rngs.size() != n || out.size() != n) throw std::invalid_argument("simulate_batch: size mismatch");
    if (!(delta_t > 0.0)) throw std::invalid_argument("simulate_batch: delta_t must be > 0");
    const double sqrt_dt = std::sqrt(delta_t);

    std::vector<Point<Dim>> pos(starts.begin(), starts.end());
    std::vector<std::size_t> active(n);
    for (std::size_t w = 0; w < n; ++w) {
        active[w] = w;
        out[w] = RolloutOutcome<Dim>{};
    }
    std::vector<Point<Dim>> xs(n), drift(n);
    std::vector<double> rate(n);

    for (long step = 0; step < max_steps && !active.empty(); ++step) {
        const std::size_t m = active.size();
        for (std::size_t k = 0; k < m; ++k) xs[k] = pos[active[k]];
        integrand(std::span<const Point<Dim>>(xs.data(), m), std::span<Point<Dim>>(drift.data(), m),
                  std::span<double>(rate.data(), m));

        std::size_t kept = 0;
        for (std::size_t k = 0; k < m; ++k) {
            const std::size_t w = active[k];
            const Point<Dim>& v = drift[k];
            if (!all_finite(v) || !std::isfinite(rate[k])) detail::throw_non_finite(xs[k], v, rate[k]);

            Point<Dim> dB = standard_normal<Dim>(rngs[w]);
            for (auto& c : dB) c *= sqrt_dt;

            Point<Dim> exit_point{};
            const Point<Dim> before = pos[w];
            auto result = detail::move_walker(pos[w], dB, domain, bc, exit_point);
            if (bc.exit_bridge && result == detail::StepResult::Inside) {
                result = detail::bridge_exit(before, pos[w], delta_t, domain, bc, rngs[w], exit_point);
                if (result == detail::StepResult::Exited) pos[w] = exit_point;
            }
            auto& o = out[w];
            if (result == detail::StepResult::Exited) {
                o.exited = true;
                o.exit_point = exit_point;
                o.exit_step = static_cast<int>(step);
                continue;
            }
            o.reward += rate[k] * delta_t;
            o.log_discount += dot(v, dB) - 0.5 * squared_norm(v) * delta_t;
            active[kept++] = w;
        }
        active.resize(kept);
    }
    for (std::size_t w = 0; w < n; ++w) out[w].terminal = pos[w];
}

/// One walker over one macro step of the plan.
template <std::size_t Dim, class Integrand>
    requires BatchIntegrand<Integrand, Dim>
RolloutOutcome<Dim> simulate_rollout(const Point<Dim>& x0, const TimeStepPlan& plan, Integrand& integrand,
                                     const Box<Dim>& domain, const BoundaryConditions<Dim>& bc, RngStream rng) {
    RolloutOutcome<Dim> out;
    simulate_batch<Dim>(std::span<const Point<Dim>>(&x0, 1), std::span<RngStream>(&rng, 1), plan.delta_t, plan.K,
                        domain, bc, integrand, std::span<RolloutOutcome<Dim>>(&out, 1));
    return out;
}

struct FkEstimate {
    double mean = 0.0;
    double std_error = 0.0;
    double truncated_fraction = 0.0;
    std::size_t samples_used = 0;
};

struct FkOptions {
    double delta_t = 1e-5;
    std::size_t n_samples = 10000;
    long max_steps = 10'000'000;
    std::uint64_t seed = 0;
    int threads = 1;
    double max_truncated_fraction = 0.01;
    bool exit_bridge = false;
};

/// Walk-to-exit Feynman-Kac estimate of u(x): mean of (g(B_tau) - R_tau) * exp(log D_tau).
/// `make_integrand()` must return a fresh integrand per worker chunk.
template <std::size_t Dim, class IntegrandFactory, class BoundaryFn>
FkEstimate fk_walk(const Point<Dim>& x, const Box<Dim>& domain, IntegrandFactory&& make_integrand,
                   BoundaryFn&& g, const FkOptions& opt) {
    if (!domain.contains(x)) throw std::invalid_argument("fk_solve: x must lie in the domain");
    if (opt.n_samples < 2) throw std::invalid_argument("fk_solve: need at least 2 samples");
    auto bc = BoundaryConditions<Dim>::all_dirichlet();
    bc.exit_bridge = opt.exit_bridge;
    const std::size_t n = opt.n_samples;
    std::vector<double> value(n, 0.0);
    std::vector<char> truncated(n, 0);

    constexpr std::size_t kChunk = 256;
    parallel_for_chunks(n, kChunk, opt.threads, [&](std::size_t b, std::size_t e) {
        const std::size_t m = e - b;
        std::vector<Point<Dim>> starts(m, x);
        std::vector<RngStream> rngs;
        rngs.reserve(m);
        for (std::size_t s = b; s < e; ++s) rngs.emplace_back(opt.seed, s, StreamTag::FeynmanKac);
        std::vector<RolloutOutcome<Dim>> outs(m);
        auto integrand = make_integrand();
        simulate_batch<Dim>(starts, rngs, opt.delta_t, opt.max_steps, domain, bc, integrand, outs);
        for (std::size_t k = 0; k < m; ++k) {
            const auto& o = outs[k];
            if (!o.exited) {
                truncated[b + k] = 1;
                continue;
            }
            value[b + k] = (g(*o.exit_point) - o.reward) * std::exp(o.log_discount);
        }
    });

    std::size_t used = 0, cut = 0;
    double sum = 0.0;
    for (std::size_t s = 0; s < n; ++s) {
        if (truncated[s]) {
            ++cut;
            continue;
        }
        sum += value[s];
        ++used;
    }
    FkEstimate est;
    est.truncated_fraction = static_cast<double>(cut) / static_cast<double>(n);
    if (est.truncated_fraction > opt.max_truncated_fraction || used < 2) {
        throw ConvergenceError("fk_solve: " + std::to_string(cut) + " of " + std::to_string(n) +
                               " walkers did not exit within max_steps");
    }
    est.mean = sum / static_cast<double>(used);
    double ss = 0.0;
    for (std::size_t s = 0; s < n; ++s) {
        if (!truncated[s]) ss += (value[s] - est.mean) * (value[s] - est.mean);
    }
    est.std_error = std::sqrt(ss / static_cast<double>(used - 1)) / std::sqrt(static_cast<double>(used));
    est.samples_used = used;
    return est;
}

} // namespace dflm
