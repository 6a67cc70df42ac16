#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "dflm/core.hpp"
#include "dflm/nn.hpp"
#include "dflm/parallel.hpp"
#include "dflm/problem.hpp"
#include "dflm/refsolver.hpp"
#include "dflm/rng.hpp"
#include "dflm/sde.hpp"
#include "dflm/timestep.hpp"

namespace dflm {

struct TrainConfig {
    std::size_t N_r = 400;
    std::size_t N_s = 300;
    std::size_t N_b = 400;
    double alpha0 = 1e-4;
    double gamma = 0.85;
    long decay_every = 1000;
    double beta1 = 0.99;
    double beta2 = 0.99;
    double adam_eps = 1e-8;
    double lambda_b = 1.0;
    double ema_decay = 0.0;          ///< >0: evaluate and checkpoint an exponential average of the weights
    long iterations = 5000;
    std::uint64_t master_seed = 1;
    TimeStepPlan plan;
    std::vector<std::size_t> hidden{200, 200, 200, 200};
    Activation activation = Activation::Relu;
    bool centered_init = false;      ///< first-layer kinks through the domain centre
    long eval_stride = 100;          ///< 0 disables periodic evaluation
    std::size_t eval_n = 501;
    long checkpoint_stride = 1000;   ///< 0 keeps only the final checkpoint
    double discount_clamp = 30.0;    ///< upper clamp on log D
    double max_clamped_fraction = 1e-3;
    int threads = 1;

    std::vector<std::size_t> layer_dims() const {
        std::vector<std::size_t> d{2};
        d.insert(d.end(), hidden.begin(), hidden.end());
        d.push_back(1);
        return d;
    }

    void validate() const {
        if (N_r < 1 || N_s < 1 || N_b < 1) throw ConfigError("N_r, N_s and N_b must be >= 1");
        if (!(gamma > 0.0 && gamma <= 1.0)) throw ConfigError("gamma must lie in (0, 1]");
        if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("beta1, beta2 must lie in [0, 1)");
        if (!(alpha0 > 0.0)) throw ConfigError("alpha0 must be > 0");
        if (decay_every < 1) throw ConfigError("decay_every must be >= 1");
        if (iterations < 0) throw ConfigError("iterations must be >= 0");
        if (!(lambda_b >= 0.0)) throw ConfigError("lambda_b must be >= 0");
        if (!(ema_decay >= 0.0 && ema_decay < 1.0)) throw ConfigError("ema_decay must lie in [0, 1)");
        if (!(plan.delta_t > 0.0) || plan.K < 1) throw ConfigError("time-step plan is not set");
        if (N_r >= (1u << 20) || N_s >= (1u << 20) || iterations >= (1l << 24)) {
            throw ConfigError("N_r, N_s must be < 2^20 and iterations < 2^24 (stream id packing)");
        }
        for (auto h : hidden) {
            if (h == 0) throw ConfigError("hidden layer widths must be >= 1");
        }
    }
};

inline double lr_schedule(double alpha0, double gamma, long iteration, long decay_every) {
    return alpha0 * std::pow(gamma, static_cast<double>(iteration / decay_every));
}

struct AdamState {
    NetworkParams m;
    NetworkParams v;
    long step = 0;

    static AdamState for_params(const NetworkParams& p) { return {p.zeros_like(), p.zeros_like(), 0}; }
};

/// Bias-corrected Adam update in place.
inline void adam_step(NetworkParams& params, const ParamGradient& grad, AdamState& state, double lr, double beta1,
                      double beta2, double eps) {
    if (state.m.layers.size() != params.layers.size()) state = AdamState::for_params(params);
    ++state.step;
    const double c1 = 1.0 - std::pow(beta1, static_cast<double>(state.step));
    const double c2 = 1.0 - std::pow(beta2, static_cast<double>(state.step));
    const auto update = [&](std::vector<double>& p, const std::vector<double>& g, std::vector<double>& m,
                            std::vector<double>& v) {
        for (std::size_t k = 0; k < p.size(); ++k) {
            m[k] = beta1 * m[k] + (1.0 - beta1) * g[k];
            v[k] = beta2 * v[k] + (1.0 - beta2) * g[k] * g[k];
            p[k] -= lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + eps);
        }
    };
    for (std::size_t l = 0; l < params.layers.size(); ++l) {
        auto& P = params.layers[l];
        const auto& G = grad.layers[l];
        update(P.weights, G.weights, state.m.layers[l].weights, state.v.layers[l].weights);
        update(P.bias, G.bias, state.m.layers[l].bias, state.v.layers[l].bias);
    }
}

/// i.i.d. uniform points strictly inside the domain; the batch is a function of
/// (seed, iteration) only.
inline std::vector<Point2> sample_interior(std::uint64_t seed, std::uint64_t iteration, const Domain& domain,
                                           std::size_t n) {
    RngStream rng(seed, iteration, StreamTag::InteriorSample);
    std::vector<Point2> pts(n);
    for (auto& p : pts) {
        for (std::size_t a = 0; a < 2; ++a) p[a] = domain.lower[a] + domain.extent(a) * rng.uniform_open();
    }
    return pts;
}

/// Uniform on the boundary: face chosen with probability proportional to its length.
inline std::vector<Point2> sample_boundary(std::uint64_t seed, std::uint64_t iteration, const Domain& domain,
                                           std::size_t n) {
    RngStream rng(seed, iteration, StreamTag::BoundarySample);
    const double w = domain.extent(0), h = domain.extent(1);
    const double perimeter = 2.0 * (w + h);
    std::vector<Point2> pts(n);
    for (auto& p : pts) {
        double s = rng.uniform() * perimeter;
        if (s < w) {
            p = {domain.lower[0] + s, domain.lower[1]};
        } else if ((s -= w) < h) {
            p = {domain.upper[0], domain.lower[1] + s};
        } else if ((s -= h) < w) {
            p = {domain.upper[0] - s, domain.upper[1]};
        } else {
            s -= w;
            p = {domain.lower[0], domain.upper[1] - std::min(s, h)};
        }
    }
    return pts;
}

struct TargetOptions {
    std::uint64_t seed = 1;
    std::uint64_t iteration = 0;
    double discount_clamp = 30.0;
    double max_clamped_fraction = 1e-3;
    int threads = 1;
    bool keep_samples = false;
};

struct TargetResult {
    std::vector<double> targets;
    std::vector<double> std_errors;  ///< per-point sample std / sqrt(N_s); 0 when N_s = 1
    std::vector<double> samples;     ///< per-walker values, index i * N_s + j (keep_samples only)
    std::size_t clamped = 0;
    std::size_t exited = 0;
};

/// T_i = mean_j (u_hat_j - R_j) exp(log D_j) over N_s walkers started at points[i] and
/// run for one macro step; u_hat is the frozen solution at the terminal position or g at
/// the exit point. Walker (i, j) of a given iteration always draws from the same stream.
template <SolutionView Solution>
TargetResult compute_targets(std::span<const Point2> points, const Solution& frozen, const ProblemSpec& problem,
                             const TimeStepPlan& plan, std::size_t N_s, const TargetOptions& opt) {
    if (N_s < 1) throw std::invalid_argument("compute_targets: N_s must be >= 1");
    const std::size_t n_pts = points.size();
    const std::size_t total = n_pts * N_s;
    std::vector<double> value(total, 0.0);
    std::vector<char> clamped(total, 0), exited(total, 0);

    constexpr std::size_t kChunk = 256;
    with_integrand_factory(problem, frozen, [&](auto& factory) {
        parallel_for_chunks(total, kChunk, opt.threads, [&](std::size_t b, std::size_t e) {
            const std::size_t m = e - b;
            std::vector<Point2> starts(m);
            std::vector<RngStream> rngs;
            rngs.reserve(m);
            for (std::size_t w = b; w < e; ++w) {
                const std::size_t i = w / N_s, j = w % N_s;
                starts[w - b] = points[i];
                rngs.emplace_back(opt.seed, rollout_stream_id(opt.iteration, i, j), StreamTag::Rollout);
            }
            std::vector<RolloutOutcome<2>> outs(m);
            auto integrand = factory();
            simulate_batch<2>(starts, rngs, plan.delta_t, plan.K, problem.domain, problem.bc, integrand, outs);

            std::vector<Point2> survivors;
            std::vector<std::size_t> where;
            for (std::size_t k = 0; k < m; ++k) {
                if (!outs[k].exited) {
                    survivors.push_back(outs[k].terminal);
                    where.push_back(k);
                }
            }
            std::vector<double> u_hat(m, 0.0), u_s(survivors.size());
            if (!survivors.empty()) frozen.values(survivors, u_s);
            for (std::size_t s = 0; s < where.size(); ++s) u_hat[where[s]] = u_s[s];
            for (std::size_t k = 0; k < m; ++k) {
                auto& o = outs[k];
                if (o.exited) {
                    u_hat[k] = problem.boundary(*o.exit_point);
                    exited[b + k] = 1;
                }
                double log_d = o.log_discount;
                if (log_d > opt.discount_clamp) {
                    log_d = opt.discount_clamp;
                    clamped[b + k] = 1;
                }
                value[b + k] = (u_hat[k] - o.reward) * std::exp(log_d);
            }
        });
    });

    TargetResult r;
    r.targets.resize(n_pts);
    r.std_errors.resize(n_pts);
    for (std::size_t i = 0; i < n_pts; ++i) {
        double sum = 0.0;
        for (std::size_t j = 0; j < N_s; ++j) sum += value[i * N_s + j];
        const double mean = sum / static_cast<double>(N_s);
        double ss = 0.0;
        for (std::size_t j = 0; j < N_s; ++j) ss += (value[i * N_s + j] - mean) * (value[i * N_s + j] - mean);
        r.targets[i] = mean;
        r.std_errors[i] = N_s > 1 ? std::sqrt(ss / static_cast<double>(N_s - 1) / static_cast<double>(N_s)) : 0.0;
        if (!std::isfinite(mean)) {
            std::ostringstream os;
            os << "non-finite target at point " << i << " (" << points[i][0] << ", " << points[i][1] << ")";
            throw NumericalError(os.str());
        }
    }
    for (std::size_t w = 0; w < total; ++w) {
        r.clamped += static_cast<std::size_t>(clamped[w]);
        r.exited += static_cast<std::size_t>(exited[w]);
    }
    if (static_cast<double>(r.clamped) > opt.max_clamped_fraction * static_cast<double>(total)) {
        throw NumericalError("log-discount clamped for " + std::to_string(r.clamped) + " of " + std::to_string(total) +
                             " walkers (limit " + std::to_string(opt.max_clamped_fraction) + ")");
    }
    if (opt.keep_samples) r.samples = std::move(value);
    return r;
}

struct LossResult {
    double interior = 0.0;   ///< mean squared residual against the targets
    double boundary = 0.0;   ///< mean squared boundary mismatch, before lambda_b
    double total = 0.0;      ///< interior + lambda_b * boundary
    ParamGradient grad;
};

/// Loss and its parameter gradient. Targets and g values are constants.
inline LossResult loss_and_grad(const NetworkParams& params, std::span<const Point2> interior,
                                std::span<const double> targets, std::span<const Point2> boundary,
                                std::span<const double> g_values, double lambda_b, int threads = 1) {
    if (interior.size() != targets.size() || boundary.size() != g_values.size()) {
        throw std::invalid_argument("loss_and_grad: shape mismatch");
    }
    const std::size_t nr = interior.size(), nb = boundary.size();
    std::vector<Point2> xs(interior.begin(), interior.end());
    xs.insert(xs.end(), boundary.begin(), boundary.end());
    const auto flat = detail::as_flat(std::span<const Point2>(xs));
    const auto u = forward_batch(params, flat, threads);

    LossResult r;
    std::vector<double> w(nr + nb, 0.0);
    for (std::size_t i = 0; i < nr; ++i) {
        const double e = u[i] - targets[i];
        r.interior += e * e;
        w[i] = 2.0 * e / static_cast<double>(nr);
    }
    for (std::size_t j = 0; j < nb; ++j) {
        const double e = u[nr + j] - g_values[j];
        r.boundary += e * e;
        w[nr + j] = 2.0 * lambda_b * e / static_cast<double>(nb);
    }
    if (nr) r.interior /= static_cast<double>(nr);
    if (nb) r.boundary /= static_cast<double>(nb);
    r.total = r.interior + lambda_b * r.boundary;
    r.grad = grad_params(params, flat, w, threads);
    return r;
}

// ---------------------------------------------------------------------------

struct IterationRecord {
    long iteration = 0;          ///< number of completed updates
    double loss_interior = 0.0;
    double loss_boundary = 0.0;
    double lr = 0.0;
    double wall_ms = 0.0;        ///< since the start of the loop
    std::optional<double> rel_l2;
};

/// Caches the evaluation grid and interpolated reference so repeated error checks only
/// cost one network pass.
class ErrorEvaluator {
public:
    ErrorEvaluator(const GridField& reference, std::size_t eval_n) {
        if (reference.n < eval_n) throw std::invalid_argument("ErrorEvaluator: reference grid coarser than evaluation grid");
        const Domain& d = reference.domain;
        pts_.resize(eval_n * eval_n);
        ref_.resize(pts_.size());
        for (std::size_t j = 0; j < eval_n; ++j) {
            for (std::size_t i = 0; i < eval_n; ++i) {
                const Point2 x{d.lower[0] + d.extent(0) * static_cast<double>(i) / static_cast<double>(eval_n - 1),
                               d.lower[1] + d.extent(1) * static_cast<double>(j) / static_cast<double>(eval_n - 1)};
                pts_[j * eval_n + i] = x;
                ref_[j * eval_n + i] = reference.interpolate(x);
            }
        }
        for (double r : ref_) ref_sq_ += r * r;
    }

    double operator()(const NetworkParams& p, int threads = 1) const {
        const auto u = forward_batch(p, detail::as_flat(std::span<const Point2>(pts_)), threads);
        double num = 0.0;
        for (std::size_t k = 0; k < u.size(); ++k) num += (u[k] - ref_[k]) * (u[k] - ref_[k]);
        return ref_sq_ > 0.0 ? std::sqrt(num / ref_sq_) : std::sqrt(num);
    }

private:
    std::vector<Point2> pts_;
    std::vector<double> ref_;
    double ref_sq_ = 0.0;
};

/// Thrown when a training iteration produces a non-finite loss or target; carries the
/// offending batch for replay.
class TrainingAborted : public std::runtime_error {
public:
    TrainingAborted(const std::string& what, long iteration, std::vector<Point2> interior, std::vector<double> targets,
                    std::vector<Point2> boundary)
        : std::runtime_error(what), iteration(iteration), interior(std::move(interior)), targets(std::move(targets)),
          boundary(std::move(boundary)) {}

    long iteration;
    std::vector<Point2> interior;
    std::vector<double> targets;
    std::vector<Point2> boundary;
};

struct TrainHooks {
    std::function<void(const IterationRecord&)> on_record;
    std::function<void(long iteration, const NetworkParams&)> on_checkpoint;
};

struct TrainResult {
    NetworkParams params;
    std::vector<IterationRecord> records;
};

/// Glorot initialisation. With centered_init the first-layer biases are set to -W c
/// (c the domain centre): with zero biases a ReLU net is positively homogeneous about
/// the origin corner and cannot form an interior bump until its biases have grown.
inline NetworkParams initial_params(const TrainConfig& cfg, const Domain& domain = Domain::unit()) {
    RngStream rng(cfg.master_seed, 0, StreamTag::Init);
    auto p = init_glorot(cfg.layer_dims(), cfg.activation, rng);
    if (cfg.centered_init) {
        auto& l = p.layers.front();
        for (std::size_t o = 0; o < l.out; ++o) {
            double s = 0.0;
            for (std::size_t i = 0; i < l.in; ++i) s += l.weights[o * l.in + i] * 0.5 * (domain.lower[i] + domain.upper[i]);
            l.bias[o] = -s;
        }
    }
    return p;
}

/// Bootstrapped training: each iteration draws fresh points, estimates targets with the
/// current (frozen) parameters, then takes one Adam step on the loss.
inline TrainResult train_loop(const TrainConfig& cfg, const ProblemSpec& problem, const GridField* reference = nullptr,
                              const TrainHooks& hooks = {}, std::optional<NetworkParams> start = std::nullopt) {
    cfg.validate();
    TrainResult res;
    res.params = start ? std::move(*start) : initial_params(cfg, problem.domain);
    res.params.validate();
    AdamState adam = AdamState::for_params(res.params);
    std::optional<NetworkParams> average;
    if (cfg.ema_decay > 0.0) average = res.params;
    const auto model = [&]() -> const NetworkParams& { return average ? *average : res.params; };
    std::optional<ErrorEvaluator> evaluator;
    if (reference && cfg.eval_stride > 0) evaluator.emplace(*reference, cfg.eval_n);

    const int threads = resolve_threads(cfg.threads);
    const auto t0 = std::chrono::steady_clock::now();
    TargetOptions topt;
    topt.seed = cfg.master_seed;
    topt.discount_clamp = cfg.discount_clamp;
    topt.max_clamped_fraction = cfg.max_clamped_fraction;
    topt.threads = threads;

    for (long n = 0; n < cfg.iterations; ++n) {
        const auto interior = sample_interior(cfg.master_seed, static_cast<std::uint64_t>(n), problem.domain, cfg.N_r);
        const auto boundary = sample_boundary(cfg.master_seed, static_cast<std::uint64_t>(n), problem.domain, cfg.N_b);
        std::vector<double> g(boundary.size());
        for (std::size_t j = 0; j < boundary.size(); ++j) g[j] = problem.boundary(boundary[j]);

        topt.iteration = static_cast<std::uint64_t>(n);
        TargetResult tr;
        try {
            tr = compute_targets(interior, NetworkSolution{&res.params}, problem, cfg.plan, cfg.N_s, topt);
        } catch (const NumericalError& e) {
            throw TrainingAborted(std::string("iteration ") + std::to_string(n + 1) + ": " + e.what(), n + 1, interior,
                                  {}, boundary);
        }
        auto loss = loss_and_grad(res.params, interior, tr.targets, boundary, g, cfg.lambda_b, threads);
        if (!std::isfinite(loss.total)) {
            throw TrainingAborted("iteration " + std::to_string(n + 1) + ": non-finite loss", n + 1, interior,
                                  std::move(tr.targets), boundary);
        }
        const double lr = lr_schedule(cfg.alpha0, cfg.gamma, n, cfg.decay_every);
        adam_step(res.params, loss.grad, adam, lr, cfg.beta1, cfg.beta2, cfg.adam_eps);
        if (average) {
            const double d = cfg.ema_decay;
            for (std::size_t l = 0; l < average->layers.size(); ++l) {
                auto& a = average->layers[l];
                const auto& p = res.params.layers[l];
                for (std::size_t k = 0; k < a.weights.size(); ++k) a.weights[k] = d * a.weights[k] + (1.0 - d) * p.weights[k];
                for (std::size_t k = 0; k < a.bias.size(); ++k) a.bias[k] = d * a.bias[k] + (1.0 - d) * p.bias[k];
            }
        }

        IterationRecord rec;
        rec.iteration = n + 1;
        rec.loss_interior = loss.interior;
        rec.loss_boundary = loss.boundary;
        rec.lr = lr;
        if (evaluator && ((n + 1) % cfg.eval_stride == 0 || n + 1 == cfg.iterations)) {
            rec.rel_l2 = (*evaluator)(model(), threads);
        }
        rec.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
        res.records.push_back(rec);
        if (hooks.on_record) hooks.on_record(rec);
        if (hooks.on_checkpoint && ((cfg.checkpoint_stride > 0 && (n + 1) % cfg.checkpoint_stride == 0) ||
                                    n + 1 == cfg.iterations)) {
            hooks.on_checkpoint(n + 1, model());
        }
    }
    if (average) res.params = std::move(*average);
    return res;
}

} // namespace dflm
