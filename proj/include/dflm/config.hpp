#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"

#include "dflm/core.hpp"
#include "dflm/field.hpp"
#include "dflm/problem.hpp"
#include "dflm/timestep.hpp"
#include "dflm/train.hpp"

namespace dflm {

using json = nlohmann::json;

struct ProblemConfig {
    std::string model = "linear_periodic"; ///< linear_periodic | nonlinear_periodic | random_field | constant
    double eps = 0.0;                      ///< scale that sets the time steps (and the period, for periodic models)
    int m0 = 12;
    std::optional<int> K;
    double macro_eps_multiplier = 1.0;     ///< used only when K is omitted
    std::optional<double> Delta_t;         ///< fixed macro step split into K micro steps
    double base = 1.0;
    double amplitude = 0.9;
    double value = 1.0;                    ///< constant model
    std::string f;
    std::string g = "0";
    RandomFieldParams random_field{};
    std::size_t table_n = 1024;
    bool exit_bridge = false;
};

struct RunConfig {
    std::string name = "run";
    ProblemConfig problem;
    TrainConfig train;
    std::optional<std::string> reference_file; ///< resolved against the config's directory
    std::size_t reference_grid = 0;            ///< FD grid to compute when no file is given; 0 = none
};

namespace detail {

/// Reads keys from one JSON object, remembering which were consumed so leftovers can be
/// reported as unknown.
class ObjectReader {
public:
    ObjectReader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) throw ConfigError(where("") + "expected an object");
    }

    bool has(const std::string& key) const { return j_.contains(key); }

    const json& raw(const std::string& key) {
        used_.insert(key);
        return j_.at(key);
    }

    template <class T>
    T get(const std::string& key, const T& fallback) {
        if (!has(key)) return fallback;
        return require<T>(key);
    }

    template <class T>
    T require(const std::string& key) {
        if (!has(key)) throw ConfigError(where(key) + "required key is missing");
        used_.insert(key);
        const json& v = j_.at(key);
        if constexpr (std::is_same_v<T, bool>) {
            if (!v.is_boolean()) throw ConfigError(where(key) + "expected a boolean");
            return v.get<bool>();
        } else if constexpr (std::is_integral_v<T>) {
            if (!v.is_number_integer()) throw ConfigError(where(key) + "expected an integer");
            const auto x = v.get<long long>();
            if constexpr (std::is_unsigned_v<T>) {
                if (x < 0) throw ConfigError(where(key) + "expected a non-negative integer");
            }
            return static_cast<T>(x);
        } else if constexpr (std::is_floating_point_v<T>) {
            if (!v.is_number()) throw ConfigError(where(key) + "expected a number");
            const double x = v.get<double>();
            if (!std::isfinite(x)) throw ConfigError(where(key) + "expected a finite number");
            return x;
        } else if constexpr (std::is_same_v<T, std::string>) {
            if (!v.is_string()) throw ConfigError(where(key) + "expected a string");
            return v.get<std::string>();
        } else {
            static_assert(sizeof(T) == 0, "unsupported config type");
        }
    }

    /// Number or named expression, returned as text.
    std::string expression(const std::string& key, const std::string& fallback) {
        if (!has(key)) return fallback;
        used_.insert(key);
        const json& v = j_.at(key);
        std::string s;
        if (v.is_number()) {
            s = ScalarExpr::constant(v.get<double>()).name();
        } else if (v.is_string()) {
            s = v.get<std::string>();
        } else {
            throw ConfigError(where(key) + "expected a number or an expression name");
        }
        try {
            (void)ScalarExpr::parse(s);
        } catch (const std::exception& e) {
            throw ConfigError(where(key) + e.what());
        }
        return s;
    }

    void reject_unknown() const {
        for (const auto& [k, v] : j_.items()) {
            if (!used_.count(k)) throw ConfigError(where(k) + "unknown key");
        }
    }

    std::string where(const std::string& key) const {
        const std::string full = path_.empty() ? key : (key.empty() ? path_ : path_ + "." + key);
        return full.empty() ? std::string("config: ") : "config key '" + full + "': ";
    }

private:
    const json& j_;
    std::string path_;
    std::set<std::string> used_;
};

inline std::string default_force(const std::string& model) {
    if (model == "linear_periodic") return "10";
    if (model == "nonlinear_periodic") return "50";
    if (model == "random_field") return "sine_wave";
    return "";
}

} // namespace detail

inline ProblemConfig parse_problem(const json& j) {
    detail::ObjectReader r(j, "problem");
    ProblemConfig p;
    p.model = r.get<std::string>("model", p.model);
    if (p.model != "linear_periodic" && p.model != "nonlinear_periodic" && p.model != "random_field" &&
        p.model != "constant") {
        throw ConfigError(r.where("model") + "unknown model '" + p.model +
                          "' (expected linear_periodic, nonlinear_periodic, random_field or constant)");
    }
    p.eps = r.require<double>("eps");
    if (!(p.eps > 0.0)) throw ConfigError(r.where("eps") + "must be > 0");
    p.m0 = r.get<int>("m0", p.m0);
    if (p.m0 < 1) throw ConfigError(r.where("m0") + "must be >= 1");
    if (r.has("K")) {
        p.K = r.require<int>("K");
        if (*p.K < 1) throw ConfigError(r.where("K") + "must be >= 1");
    }
    if (r.has("macro_eps_multiplier")) {
        if (p.K) throw ConfigError(r.where("macro_eps_multiplier") + "give either K or macro_eps_multiplier, not both");
        p.macro_eps_multiplier = r.require<double>("macro_eps_multiplier");
        if (!(p.macro_eps_multiplier > 0.0)) throw ConfigError(r.where("macro_eps_multiplier") + "must be > 0");
    }
    if (r.has("Delta_t")) {
        p.Delta_t = r.require<double>("Delta_t");
        if (!(*p.Delta_t > 0.0)) throw ConfigError(r.where("Delta_t") + "must be > 0");
        if (!p.K) throw ConfigError(r.where("Delta_t") + "requires K");
    }
    p.base = r.get<double>("base", p.base);
    p.amplitude = r.get<double>("amplitude", p.amplitude);
    p.value = r.get<double>("value", p.value);
    p.f = r.expression("f", detail::default_force(p.model));
    if (p.f.empty()) throw ConfigError(r.where("f") + "required key is missing");
    p.g = r.expression("g", p.g);
    if (r.has("random_field")) {
        if (p.model != "random_field") throw ConfigError(r.where("random_field") + "only valid with model random_field");
        detail::ObjectReader rf(r.raw("random_field"), "problem.random_field");
        p.random_field.seed = rf.get<std::uint64_t>("seed", p.random_field.seed);
        p.random_field.kmax = rf.get<int>("kmax", p.random_field.kmax);
        p.random_field.decay_exp = rf.get<double>("decay_exp", p.random_field.decay_exp);
        p.random_field.offset = rf.get<double>("offset", p.random_field.offset);
        p.random_field.scale = rf.get<double>("scale", p.random_field.scale);
        p.table_n = rf.get<std::size_t>("table_n", p.table_n);
        if (p.random_field.kmax < 1) throw ConfigError(rf.where("kmax") + "must be >= 1");
        if (p.table_n < 4) throw ConfigError(rf.where("table_n") + "must be >= 4");
        rf.reject_unknown();
    }
    p.exit_bridge = r.get<bool>("exit_bridge", p.exit_bridge);
    if (p.model == "constant" && !(p.value > 0.0)) throw ConfigError(r.where("value") + "must be > 0");
    r.reject_unknown();
    return p;
}

inline TimeStepPlan build_plan(const ProblemConfig& p) {
    if (p.Delta_t) return plan_from_macro(*p.Delta_t, *p.K, 2);
    const int K = p.K ? *p.K
                      : static_cast<int>(std::ceil(step_ratio(p.m0, 2) * p.macro_eps_multiplier * p.macro_eps_multiplier - 1e-9));
    return make_plan(p.eps, p.m0, K, 2);
}

inline CoefficientModel build_coefficient(const ProblemConfig& p, bool with_table = true) {
    if (p.model == "linear_periodic") return PeriodicLinear{p.eps, p.base, p.amplitude};
    if (p.model == "nonlinear_periodic") return NonlinearPeriodic{p.eps, p.base, p.amplitude};
    if (p.model == "constant") return ConstantCoefficient{p.value};
    RandomFieldCoefficient c;
    c.field = std::make_shared<const RandomField>(p.random_field);
    if (with_table) c.table = std::make_shared<const FieldTable>(c.field->tabulate(p.table_n));
    return c;
}

inline ProblemSpec build_problem(const ProblemConfig& p, bool with_table = true) {
    auto spec = make_problem(build_coefficient(p, with_table), ScalarExpr::parse(p.f), ScalarExpr::parse(p.g));
    spec.bc.exit_bridge = p.exit_bridge;
    return spec;
}

inline RunConfig parse_config(const json& j, const std::filesystem::path& base_dir = {}) {
    detail::ObjectReader r(j, "");
    RunConfig c;
    c.name = r.get<std::string>("name", c.name);
    c.problem = parse_problem(r.raw("problem"));
    auto& t = c.train;
    t.N_r = r.get<std::size_t>("N_r", t.N_r);
    t.N_s = r.get<std::size_t>("N_s", t.N_s);
    t.N_b = r.get<std::size_t>("N_b", t.N_b);
    t.alpha0 = r.get<double>("alpha0", t.alpha0);
    t.gamma = r.get<double>("gamma", t.gamma);
    t.decay_every = r.get<long>("decay_every", t.decay_every);
    t.beta1 = r.get<double>("beta1", t.beta1);
    t.beta2 = r.get<double>("beta2", t.beta2);
    t.adam_eps = r.get<double>("adam_eps", t.adam_eps);
    t.lambda_b = r.get<double>("lambda_b", t.lambda_b);
    t.ema_decay = r.get<double>("ema_decay", t.ema_decay);
    t.iterations = r.get<long>("iterations", t.iterations);
    t.master_seed = r.get<std::uint64_t>("master_seed", t.master_seed);
    if (r.has("hidden")) {
        const json& h = r.raw("hidden");
        if (!h.is_array()) throw ConfigError(r.where("hidden") + "expected an array of layer widths");
        t.hidden.clear();
        for (const auto& w : h) {
            if (!w.is_number_integer() || w.get<long long>() < 1) {
                throw ConfigError(r.where("hidden") + "layer widths must be positive integers");
            }
            t.hidden.push_back(w.get<std::size_t>());
        }
    }
    if (r.has("activation")) {
        const auto a = r.require<std::string>("activation");
        try {
            t.activation = parse_activation(a);
        } catch (const std::exception& e) {
            throw ConfigError(r.where("activation") + e.what());
        }
    }
    t.centered_init = r.get<bool>("centered_init", t.centered_init);
    t.eval_stride = r.get<long>("eval_stride", t.eval_stride);
    t.eval_n = r.get<std::size_t>("eval_n", t.eval_n);
    t.checkpoint_stride = r.get<long>("checkpoint_stride", t.checkpoint_stride);
    t.discount_clamp = r.get<double>("discount_clamp", t.discount_clamp);
    t.max_clamped_fraction = r.get<double>("max_clamped_fraction", t.max_clamped_fraction);
    t.threads = r.get<int>("threads", t.threads);
    if (r.has("reference_file")) {
        std::filesystem::path ref = r.require<std::string>("reference_file");
        if (ref.is_relative() && !base_dir.empty()) ref = base_dir / ref;
        c.reference_file = ref.string();
    }
    c.reference_grid = r.get<std::size_t>("reference_grid", c.reference_grid);
    if (c.reference_grid != 0 && c.reference_grid < 3) throw ConfigError(r.where("reference_grid") + "must be >= 3");
    if (t.eval_n < 2) throw ConfigError(r.where("eval_n") + "must be >= 2");
    r.reject_unknown();

    t.plan = build_plan(c.problem);
    try {
        t.validate();
    } catch (const ConfigError& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
    return c;
}

inline RunConfig parse_config_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open config file: " + path);
    json j;
    try {
        j = json::parse(is);
    } catch (const json::parse_error& e) {
        throw ConfigError("config file " + path + " is not valid JSON: " + e.what());
    }
    return parse_config(j, std::filesystem::path(path).parent_path());
}

inline json plan_to_json(const TimeStepPlan& plan) {
    json j = {{"delta_t", plan.delta_t}, {"Delta_t", plan.Delta_t}, {"K", plan.K}, {"m0", plan.m0}, {"kappa", plan.kappa_d}};
    if (plan.warning) j["warning"] = *plan.warning;
    return j;
}

/// Fully resolved config; parse_config(to_json(c)) reproduces c.
inline json to_json(const RunConfig& c) {
    const auto& p = c.problem;
    json pj = {{"model", p.model}, {"eps", p.eps}, {"m0", p.m0}, {"base", p.base}, {"amplitude", p.amplitude}, {"f", p.f}, {"g", p.g}};
    if (p.K) {
        pj["K"] = *p.K;
    } else {
        pj["macro_eps_multiplier"] = p.macro_eps_multiplier;
    }
    if (p.Delta_t) pj["Delta_t"] = *p.Delta_t;
    if (p.exit_bridge) pj["exit_bridge"] = true;
    if (p.model == "constant") pj["value"] = p.value;
    if (p.model == "random_field") {
        pj["random_field"] = {{"seed", p.random_field.seed},     {"kmax", p.random_field.kmax},
                              {"decay_exp", p.random_field.decay_exp}, {"offset", p.random_field.offset},
                              {"scale", p.random_field.scale},   {"table_n", p.table_n}};
    }
    const auto& t = c.train;
    json j = {{"name", c.name},
              {"problem", pj},
              {"N_r", t.N_r},
              {"N_s", t.N_s},
              {"N_b", t.N_b},
              {"alpha0", t.alpha0},
              {"gamma", t.gamma},
              {"decay_every", t.decay_every},
              {"beta1", t.beta1},
              {"beta2", t.beta2},
              {"adam_eps", t.adam_eps},
              {"lambda_b", t.lambda_b},
              {"ema_decay", t.ema_decay},
              {"iterations", t.iterations},
              {"master_seed", t.master_seed},
              {"hidden", t.hidden},
              {"activation", to_string(t.activation)},
              {"centered_init", t.centered_init},
              {"eval_stride", t.eval_stride},
              {"eval_n", t.eval_n},
              {"checkpoint_stride", t.checkpoint_stride},
              {"discount_clamp", t.discount_clamp},
              {"max_clamped_fraction", t.max_clamped_fraction},
              {"threads", t.threads},
              {"reference_grid", c.reference_grid}};
    if (c.reference_file) j["reference_file"] = std::filesystem::absolute(*c.reference_file).string();
    return j;
}

} // namespace dflm
