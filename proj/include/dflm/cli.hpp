#pragma once

#include <chrono>
#include <cstdint>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "dflm/config.hpp"
#include "dflm/field.hpp"
#include "dflm/io.hpp"
#include "dflm/nn.hpp"
#include "dflm/problem.hpp"
#include "dflm/refsolver.hpp"
#include "dflm/timestep.hpp"
#include "dflm/train.hpp"

#ifndef DFLM_BUILD_ID
#define DFLM_BUILD_ID "unknown"
#endif

namespace dflm::cli {

namespace fs = std::filesystem;

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitAborted = 3;

/// Raised for missing or unreadable inputs and unwritable outputs.
class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline std::string utc_timestamp() {
    const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    std::ostringstream os;
    os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
    return os.str();
}

inline void write_json(const fs::path& path, const json& j) {
    std::ofstream os(path);
    if (!os) throw IoError("cannot open for writing: " + path.string());
    os << j.dump(2) << '\n';
}

inline void ensure_dir(const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create directory " + dir.string() + ": " + ec.message());
}

/// Seed of trial t; trial 0 keeps the configured seed.
inline std::uint64_t trial_seed(std::uint64_t master, int trial) {
    if (trial == 0) return master;
    std::uint64_t z = master + 0x9E3779B97F4A7C15ull * static_cast<std::uint64_t>(trial);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

inline GridField load_or_solve_reference(const RunConfig& cfg, const ProblemSpec& problem, const fs::path& out_dir,
                                         int threads, std::vector<std::string>& files) {
    if (cfg.reference_file) {
        if (!fs::exists(*cfg.reference_file)) throw IoError("reference file not found: " + *cfg.reference_file);
        return read_grid_csv(*cfg.reference_file);
    }
    FdOptions fo;
    fo.threads = threads;
    auto ref = solve_reference(problem, cfg.reference_grid, fo);
    write_grid_csv((out_dir / "ref.csv").string(), ref);
    files.push_back("ref.csv");
    return ref;
}

struct TrainArgs {
    std::string config;
    std::string out;
    int trials = 1;
    int threads = 0;
    long iterations = -1;
};

inline int run_train(const TrainArgs& a) {
    RunConfig cfg = parse_config_file(a.config);
    if (a.iterations >= 0) cfg.train.iterations = a.iterations;
    if (a.trials < 1) throw ConfigError("--trials must be >= 1");
    const int threads = resolve_threads(a.threads > 0 ? a.threads : cfg.train.threads);
    cfg.train.threads = threads;
    cfg.train.validate();

    const fs::path out(a.out);
    ensure_dir(out);
    const std::string started = utc_timestamp();
    if (cfg.train.plan.warning) std::cerr << "warning: " << *cfg.train.plan.warning << '\n';

    const ProblemSpec problem = build_problem(cfg.problem);
    std::vector<std::string> files;
    std::optional<GridField> reference;
    if (cfg.reference_file || cfg.reference_grid > 0) reference = load_or_solve_reference(cfg, problem, out, threads, files);

    std::vector<std::vector<IterationRecord>> all;
    std::vector<std::uint64_t> seeds;
    for (int t = 0; t < a.trials; ++t) {
        TrainConfig tc = cfg.train;
        tc.master_seed = trial_seed(cfg.train.master_seed, t);
        seeds.push_back(tc.master_seed);
        const fs::path dir = a.trials == 1 ? out : out / ("trial_" + std::to_string(t));
        const std::string prefix = a.trials == 1 ? "" : "trial_" + std::to_string(t) + "/";
        ensure_dir(dir);

        std::ofstream metrics(dir / "metrics.csv");
        if (!metrics) throw IoError("cannot open for writing: " + (dir / "metrics.csv").string());
        metrics << kMetricsHeader << '\n';
        files.push_back(prefix + "metrics.csv");

        TrainHooks hooks;
        hooks.on_record = [&](const IterationRecord& r) {
            write_metrics_row(metrics, r);
            metrics.flush();
        };
        hooks.on_checkpoint = [&](long it, const NetworkParams& p) {
            const std::string name = "ckpt_" + std::to_string(it) + ".dflm";
            save_checkpoint((dir / name).string(), p);
            files.push_back(prefix + name);
        };
        if (tc.iterations == 0) hooks.on_checkpoint(0, initial_params(tc, problem.domain));

        try {
            auto result = train_loop(tc, problem, reference ? &*reference : nullptr, hooks);
            all.push_back(std::move(result.records));
        } catch (const TrainingAborted& e) {
            json batch = {{"iteration", e.iteration}, {"error", e.what()}, {"master_seed", tc.master_seed},
                          {"interior", e.interior},   {"targets", e.targets}, {"boundary", e.boundary}};
            write_json(dir / "aborted_batch.json", batch);
            std::cerr << "error: " << e.what() << " (batch written to " << (dir / "aborted_batch.json").string() << ")\n";
            return kExitAborted;
        }
    }

    std::optional<double> final_rel_l2;
    if (a.trials > 1) {
        std::ofstream avg(out / "metrics.csv");
        if (!avg) throw IoError("cannot open for writing: " + (out / "metrics.csv").string());
        avg << kMetricsHeader << '\n';
        for (std::size_t k = 0; k < all.front().size(); ++k) {
            IterationRecord m;
            m.iteration = all.front()[k].iteration;
            m.lr = all.front()[k].lr;
            double rel = 0.0;
            bool has_rel = true;
            for (const auto& recs : all) {
                m.loss_interior += recs[k].loss_interior / a.trials;
                m.loss_boundary += recs[k].loss_boundary / a.trials;
                m.wall_ms += recs[k].wall_ms / a.trials;
                if (recs[k].rel_l2) {
                    rel += *recs[k].rel_l2 / a.trials;
                } else {
                    has_rel = false;
                }
            }
            if (has_rel) m.rel_l2 = rel;
            write_metrics_row(avg, m);
        }
        files.push_back("metrics.csv");
    }
    if (!all.empty() && !all.front().empty()) {
        double s = 0.0;
        bool ok = true;
        for (const auto& recs : all) {
            if (recs.back().rel_l2) {
                s += *recs.back().rel_l2;
            } else {
                ok = false;
            }
        }
        if (ok) final_rel_l2 = s / a.trials;
    }

    files.push_back("run.json");
    json manifest = {{"config", to_json(cfg)},
                     {"plan", plan_to_json(cfg.train.plan)},
                     {"build_id", DFLM_BUILD_ID},
                     {"master_seed", cfg.train.master_seed},
                     {"trial_seeds", seeds},
                     {"trials", a.trials},
                     {"threads", threads},
                     {"started", started},
                     {"finished", utc_timestamp()},
                     {"files", files}};
    if (final_rel_l2) manifest["final_rel_l2"] = *final_rel_l2;
    write_json(out / "run.json", manifest);
    if (final_rel_l2) std::cout << "final rel_l2 " << *final_rel_l2 << '\n';
    return kExitOk;
}

inline int run_bounds(double eps, int m0, int dim, std::optional<int> K) {
    json j = {{"kappa", kappa(dim)},
              {"micro_upper", micro_upper_bound(m0, eps, dim)},
              {"macro_lower", macro_lower_bound(eps, dim)},
              {"K0", step_ratio(m0, dim)}};
    const auto plan = make_plan(eps, m0, K.value_or(step_ratio(m0, dim)), dim);
    j["K"] = plan.K;
    j["delta_t"] = plan.delta_t;
    j["Delta_t"] = plan.Delta_t;
    if (plan.warning) j["warning"] = *plan.warning;
    std::cout << j.dump(2) << '\n';
    return kExitOk;
}

inline int run_eval(const std::string& checkpoint, const std::string& ref_path, const std::string& out,
                    std::string pointwise, std::size_t eval_n, int threads) {
    if (!fs::exists(checkpoint)) throw IoError("checkpoint not found: " + checkpoint);
    if (!fs::exists(ref_path)) throw IoError("reference file not found: " + ref_path);
    if (const auto parent = fs::path(out).parent_path(); !parent.empty()) ensure_dir(parent);
    const auto params = load_checkpoint(checkpoint);
    const auto ref = read_grid_csv(ref_path);
    const auto report = relative_l2(network_evaluator(params, resolve_threads(threads)), ref, eval_n);
    if (pointwise.empty()) pointwise = (fs::path(out).parent_path() / "pointwise.csv").string();
    json j = to_json(report);
    j["checkpoint"] = fs::absolute(checkpoint).string();
    j["reference"] = fs::absolute(ref_path).string();
    j["pointwise_csv"] = fs::absolute(pointwise).string();
    write_json(out, j);
    write_pointwise_csv(pointwise, report);
    std::cout << "rel_l2 " << report.rel_l2 << '\n';
    return kExitOk;
}

inline int run_reference(const std::string& config, std::size_t grid, const std::string& out, int threads) {
    const RunConfig cfg = parse_config_file(config);
    const ProblemSpec problem = build_problem(cfg.problem, false);
    FdOptions fo;
    fo.threads = resolve_threads(threads);
    FdStats st;
    const auto g = solve_reference(problem, grid, fo, &st);
    write_grid_csv(out, g);
    std::cerr << "cg iterations " << st.cg_iterations;
    if (st.picard_iterations) std::cerr << ", picard iterations " << st.picard_iterations;
    std::cerr << '\n';
    return kExitOk;
}

inline int run_fk(const std::string& config, double x1, double x2, std::size_t samples, double dt, std::uint64_t seed,
                  const std::string& checkpoint, int threads) {
    const RunConfig cfg = parse_config_file(config);
    const ProblemSpec problem = build_problem(cfg.problem);
    FkOptions opt;
    opt.delta_t = dt;
    opt.n_samples = samples;
    opt.seed = seed;
    opt.threads = resolve_threads(threads);
    opt.exit_bridge = cfg.problem.exit_bridge;
    FkEstimate est;
    if (problem.nonlinear()) {
        if (checkpoint.empty()) throw ConfigError("fk: nonlinear coefficient needs --checkpoint for u");
        const auto params = load_checkpoint(checkpoint);
        est = fk_solve({x1, x2}, problem, opt, NetworkSolution{&params});
    } else {
        est = fk_solve({x1, x2}, problem, opt);
    }
    json j = {{"x", {x1, x2}},
              {"mean", est.mean},
              {"std_error", est.std_error},
              {"truncated_fraction", est.truncated_fraction},
              {"samples_used", est.samples_used},
              {"delta_t", dt}};
    std::cout << j.dump(2) << '\n';
    return kExitOk;
}

inline int run_field(const std::string& config, std::size_t grid, const std::string& out, double u,
                     const std::string& field_json) {
    const RunConfig cfg = parse_config_file(config);
    if (grid < 2) throw ConfigError("--grid must be >= 2");
    std::ofstream os(out);
    if (!os) throw IoError("cannot open for writing: " + out);
    os << "x1,x2,a\n" << std::setprecision(17);
    double mn = std::numeric_limits<double>::infinity();
    const auto node = [&](std::size_t i) { return static_cast<double>(i) / static_cast<double>(grid - 1); };
    if (cfg.problem.model == "random_field") {
        const RandomField field(cfg.problem.random_field);
        std::vector<double> xs(grid);
        for (std::size_t i = 0; i < grid; ++i) xs[i] = node(i);
        const auto s = field.tensor(xs, xs, false);
        for (std::size_t j = 0; j < grid; ++j) {
            for (std::size_t i = 0; i < grid; ++i) {
                const double a = s.a[j * grid + i];
                mn = std::min(mn, a);
                os << xs[i] << ',' << xs[j] << ',' << a << '\n';
            }
        }
        if (!field_json.empty()) write_json(field_json, to_json(cfg.problem.random_field));
    } else {
        const auto model = build_coefficient(cfg.problem, false);
        for (std::size_t j = 0; j < grid; ++j) {
            for (std::size_t i = 0; i < grid; ++i) {
                const Point2 x{node(i), node(j)};
                const double a = evaluate(model, x, u).a;
                mn = std::min(mn, a);
                os << x[0] << ',' << x[1] << ',' << a << '\n';
            }
        }
    }
    std::cerr << "min a " << mn << '\n';
    return kExitOk;
}

/// Entry point shared by the binary and the tests.
inline int run(int argc, char** argv) {
    CLI::App app{"Derivative-free martingale-loss solver for multiscale elliptic problems"};
    app.require_subcommand(1);
    int threads = 0;

    auto* bounds = app.add_subcommand("bounds", "Print micro/macro time-step bounds as JSON");
    double b_eps = 0.0;
    int b_m0 = 12, b_dim = 2;
    std::optional<int> b_K;
    bounds->add_option("--eps", b_eps, "Scale eps")->required();
    bounds->add_option("--m0", b_m0, "Resolution parameter m0")->capture_default_str();
    bounds->add_option("--dim", b_dim, "Dimension")->capture_default_str();
    bounds->add_option("--K", b_K, "Micro steps per macro step (default K0)");

    auto* train = app.add_subcommand("train", "Train a network from a JSON config");
    TrainArgs ta;
    train->add_option("--config", ta.config, "Config JSON")->required();
    train->add_option("--out", ta.out, "Run directory")->required();
    train->add_option("--trials", ta.trials, "Independent trials with derived seeds")->capture_default_str();
    train->add_option("--iterations", ta.iterations, "Override the configured iteration count");
    train->add_option("--threads", threads, "Worker threads (default: DFLM_THREADS, then hardware)");

    auto* eval = app.add_subcommand("eval", "Relative L2 error of a checkpoint against a reference grid");
    std::string e_ckpt, e_ref, e_out, e_pw;
    std::size_t e_n = 501;
    eval->add_option("--checkpoint", e_ckpt, "Checkpoint file")->required();
    eval->add_option("--ref", e_ref, "Reference CSV")->required();
    eval->add_option("--out", e_out, "Report JSON")->required();
    eval->add_option("--pointwise", e_pw, "Pointwise error CSV (default: next to the report)");
    eval->add_option("--eval-n", e_n, "Evaluation grid per axis")->capture_default_str();
    eval->add_option("--threads", threads, "Worker threads");

    auto* reference = app.add_subcommand("reference", "Finite-difference reference solution");
    std::string r_cfg, r_out;
    std::size_t r_grid = 1024;
    reference->add_option("--config", r_cfg, "Config JSON")->required();
    reference->add_option("--grid", r_grid, "Grid points per axis")->capture_default_str();
    reference->add_option("--out", r_out, "Output CSV")->required();
    reference->add_option("--threads", threads, "Worker threads");

    auto* fk = app.add_subcommand("fk", "Walk-to-exit Feynman-Kac estimate at one point");
    std::string f_cfg, f_ckpt;
    double f_x1 = 0.5, f_x2 = 0.5, f_dt = 1e-5;
    std::size_t f_n = 10000;
    std::uint64_t f_seed = 1;
    fk->add_option("--config", f_cfg, "Config JSON")->required();
    fk->add_option("--x1", f_x1)->capture_default_str();
    fk->add_option("--x2", f_x2)->capture_default_str();
    fk->add_option("--samples", f_n)->capture_default_str();
    fk->add_option("--dt", f_dt, "Micro step")->capture_default_str();
    fk->add_option("--seed", f_seed)->capture_default_str();
    fk->add_option("--checkpoint", f_ckpt, "Network supplying u for nonlinear coefficients");
    fk->add_option("--threads", threads, "Worker threads");

    auto* field = app.add_subcommand("field", "Sample the coefficient on a grid");
    std::string c_cfg, c_out, c_json;
    std::size_t c_grid = 512;
    double c_u = 0.0;
    field->add_option("--config", c_cfg, "Config JSON")->required();
    field->add_option("--grid", c_grid)->capture_default_str();
    field->add_option("--out", c_out, "Output CSV")->required();
    field->add_option("--u", c_u, "Solution value for u-dependent coefficients")->capture_default_str();
    field->add_option("--field-json", c_json, "Write random-field parameters here");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? kExitOk : kExitConfig;
    }

    try {
        if (*bounds) return run_bounds(b_eps, b_m0, b_dim, b_K);
        if (*train) {
            ta.threads = threads;
            return run_train(ta);
        }
        if (*eval) return run_eval(e_ckpt, e_ref, e_out, e_pw, e_n, threads);
        if (*reference) return run_reference(r_cfg, r_grid, r_out, threads);
        if (*fk) return run_fk(f_cfg, f_x1, f_x2, f_n, f_dt, f_seed, f_ckpt, threads);
        if (*field) return run_field(c_cfg, c_grid, c_out, c_u, c_json);
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitConfig;
    } catch (const IoError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitConfig;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitFailure;
    }
    return kExitFailure;
}

} // namespace dflm::cli
