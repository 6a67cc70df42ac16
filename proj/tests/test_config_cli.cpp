#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "dflm/cli.hpp"

#include "support.hpp"

using namespace dflm;
namespace fs = std::filesystem;

namespace {

const fs::path kPresets = DFLM_PRESET_DIR;

struct Captured {
    int rc = 0;
    std::string out;
    std::string err;
};

Captured run_cli(std::vector<std::string> args) {
    args.insert(args.begin(), "dflm");
    std::vector<char*> argv;
    for (auto& a : args) argv.push_back(a.data());
    testing::internal::CaptureStdout();
    testing::internal::CaptureStderr();
    Captured c;
    c.rc = cli::run(static_cast<int>(argv.size()), argv.data());
    c.out = testing::internal::GetCapturedStdout();
    c.err = testing::internal::GetCapturedStderr();
    return c;
}

class TempDir {
public:
    TempDir() {
        path_ = fs::temp_directory_path() /
                ("dflm_test_" + std::to_string(::testing::UnitTest::GetInstance()->random_seed()) + "_" +
                 ::testing::UnitTest::GetInstance()->current_test_info()->name());
        fs::remove_all(path_);
        fs::create_directories(path_);
    }
    ~TempDir() { fs::remove_all(path_); }
    const fs::path& path() const { return path_; }
    std::string operator/(const std::string& f) const { return (path_ / f).string(); }

private:
    fs::path path_;
};

void write_file(const std::string& path, const std::string& text) {
    std::ofstream(path) << text;
}

std::string read_file(const std::string& path) {
    std::ifstream is(path);
    return {std::istreambuf_iterator<char>(is), {}};
}

std::string config_error(const json& j) {
    try {
        parse_config(j);
    } catch (const ConfigError& e) {
        return e.what();
    }
    return "";
}

json tiny_config() {
    return json::parse(R"({
        "name": "tiny",
        "problem": {"model": "linear_periodic", "eps": 0.1, "K": 8, "f": 10, "g": 0},
        "N_r": 20, "N_s": 5, "N_b": 20, "hidden": [8, 8], "activation": "tanh",
        "alpha0": 1e-3, "iterations": 6, "eval_stride": 3, "eval_n": 17,
        "checkpoint_stride": 3, "reference_grid": 33
    })");
}

} // namespace

TEST(Presets, AllParseAndMatchPublishedHyperparameters) {
    struct Expect {
        const char* file;
        std::size_t nr, ns, nb;
        double alpha0, gamma;
        long iterations;
        std::size_t width, depth;
    };
    const Expect table[] = {
        {"linear_eps005.json", 400, 300, 400, 1e-4, 0.85, 5000, 200, 4},
        {"linear_eps001.json", 400, 300, 400, 7e-5, 0.85, 15000, 200, 4},
        {"nonlinear_eps005.json", 600, 400, 400, 5e-4, 0.5, 10000, 200, 4},
        {"nonlinear_eps001.json", 600, 400, 400, 9e-4, 0.8, 10000, 200, 4},
        {"randfield.json", 1600, 600, 400, 5e-4, 0.8, 10000, 300, 5},
        {"microstep_eps01.json", 400, 300, 400, 1e-4, 0.9, 5000, 200, 4},
    };
    for (const auto& e : table) {
        SCOPED_TRACE(e.file);
        const auto c = parse_config_file((kPresets / e.file).string());
        EXPECT_EQ(c.train.N_r, e.nr);
        EXPECT_EQ(c.train.N_s, e.ns);
        EXPECT_EQ(c.train.N_b, e.nb);
        EXPECT_EQ(c.train.alpha0, e.alpha0);
        EXPECT_EQ(c.train.gamma, e.gamma);
        EXPECT_EQ(c.train.iterations, e.iterations);
        EXPECT_EQ(c.train.hidden, std::vector<std::size_t>(e.depth, e.width));
        EXPECT_EQ(c.train.beta1, 0.99);
        EXPECT_EQ(c.train.beta2, 0.99);
        EXPECT_EQ(c.train.decay_every, 1000);
        EXPECT_EQ(c.train.activation, Activation::Relu);
        EXPECT_NO_THROW(build_problem(c.problem, false));
    }
}

TEST(Presets, TimeStepPlans) {
    const auto lin = parse_config_file((kPresets / "linear_eps005.json").string());
    EXPECT_EQ(lin.train.plan.K, 72);
    EXPECT_TRUE(test::agrees_to_printed(lin.train.plan.delta_t, 1.10e-5));
    const auto rf = parse_config_file((kPresets / "randfield.json").string());
    EXPECT_EQ(rf.train.plan.K, 288);
    const auto micro = parse_config_file((kPresets / "microstep_eps01.json").string());
    EXPECT_DOUBLE_EQ(micro.train.plan.Delta_t, 1e-3);
    const auto smoke = parse_config_file((kPresets / "smoke_linear_eps005.json").string());
    EXPECT_EQ(smoke.train.N_r, 200u);
    EXPECT_EQ(smoke.train.N_s, 100u);
    EXPECT_EQ(smoke.train.iterations, 1500);
}

TEST(Config, NamedErrors) {
    auto j = tiny_config();
    j["problem"].erase("eps");
    EXPECT_NE(config_error(j).find("problem.eps"), std::string::npos) << config_error(j);

    j = tiny_config();
    j["problem"]["eps"] = -0.1;
    EXPECT_NE(config_error(j).find("problem.eps"), std::string::npos);

    j = tiny_config();
    j["N_rr"] = 3;
    EXPECT_NE(config_error(j).find("N_rr"), std::string::npos);

    j = tiny_config();
    j["problem"]["model"] = "cubic";
    EXPECT_NE(config_error(j).find("problem.model"), std::string::npos);

    j = tiny_config();
    j["problem"]["macro_eps_multiplier"] = 2;
    EXPECT_NE(config_error(j).find("macro_eps_multiplier"), std::string::npos);

    j = tiny_config();
    j["gamma"] = 1.5;
    EXPECT_NE(config_error(j).find("gamma"), std::string::npos);

    j = tiny_config();
    j["hidden"] = json::array({8, 0});
    EXPECT_NE(config_error(j).find("hidden"), std::string::npos);
}

TEST(Config, MultiplierSetsStepRatio) {
    auto j = tiny_config();
    j["problem"].erase("K");
    EXPECT_EQ(parse_config(j).train.plan.K, 72);
    j["problem"]["macro_eps_multiplier"] = 2;
    EXPECT_EQ(parse_config(j).train.plan.K, 288);
}

TEST(Config, ResolvedConfigRoundTrips) {
    const auto a = parse_config_file((kPresets / "randfield.json").string());
    const auto b = parse_config(to_json(a));
    EXPECT_EQ(to_json(a), to_json(b));
    EXPECT_EQ(b.train.plan.K, a.train.plan.K);
    EXPECT_EQ(b.problem.random_field.seed, a.problem.random_field.seed);

    auto j = to_json(parse_config_file((kPresets / "linear_eps005.json").string()));
    EXPECT_FALSE(build_problem(parse_config(j).problem).bc.exit_bridge);
    j["problem"]["exit_bridge"] = true;
    j["ema_decay"] = 0.99;
    const auto c = parse_config(j);
    EXPECT_TRUE(build_problem(c.problem).bc.exit_bridge);
    EXPECT_EQ(c.train.ema_decay, 0.99);
    EXPECT_EQ(to_json(c), to_json(parse_config(to_json(c))));
}

TEST(Cli, BoundsPrintsStepRatio) {
    const auto c = run_cli({"bounds", "--eps", "0.05"});
    ASSERT_EQ(c.rc, 0) << c.err;
    const auto j = json::parse(c.out);
    EXPECT_EQ(j["K0"], 72);
    EXPECT_TRUE(test::agrees_to_printed(j["micro_upper"].get<double>(), 1.10e-5));
    EXPECT_TRUE(test::agrees_to_printed(j["macro_lower"].get<double>(), 7.96e-4));
    const auto low = run_cli({"bounds", "--eps", "0.05", "--K", "10"});
    EXPECT_TRUE(json::parse(low.out).contains("warning"));
}

TEST(Cli, ExitCodes) {
    TempDir tmp;
    EXPECT_EQ(run_cli({"train", "--config", tmp / "missing.json", "--out", tmp / "run"}).rc, cli::kExitConfig);
    EXPECT_EQ(run_cli({"train"}).rc, cli::kExitConfig);
    EXPECT_EQ(run_cli({"frobnicate"}).rc, cli::kExitConfig);
    write_file(tmp / "bad.json", "{ not json");
    const auto c = run_cli({"train", "--config", tmp / "bad.json", "--out", tmp / "run"});
    EXPECT_EQ(c.rc, cli::kExitConfig);
    EXPECT_NE(c.err.find("not valid JSON"), std::string::npos);
}

TEST(Cli, TrainWritesRunArtifacts) {
    TempDir tmp;
    write_file(tmp / "tiny.json", tiny_config().dump());
    const auto c = run_cli({"train", "--config", tmp / "tiny.json", "--out", tmp / "run", "--threads", "2"});
    ASSERT_EQ(c.rc, 0) << c.err;
    EXPECT_NE(c.out.find("final rel_l2"), std::string::npos);
    for (const char* f : {"metrics.csv", "run.json", "ref.csv", "ckpt_3.dflm", "ckpt_6.dflm"}) {
        EXPECT_TRUE(fs::exists(tmp.path() / "run" / f)) << f;
    }
    const auto manifest = json::parse(read_file(tmp / "run/run.json"));
    EXPECT_EQ(manifest["threads"], 2);
    EXPECT_EQ(manifest["config"]["problem"]["eps"], 0.1);
    EXPECT_EQ(manifest["plan"]["K"], 8);
    EXPECT_TRUE(manifest.contains("final_rel_l2"));

    const auto metrics = read_file(tmp / "run/metrics.csv");
    EXPECT_EQ(metrics.substr(0, metrics.find('\n')), kMetricsHeader);
    EXPECT_EQ(std::count(metrics.begin(), metrics.end(), '\n'), 7);

    // eval reproduces the training-time error from the checkpoint and reference
    const auto e = run_cli({"eval", "--checkpoint", tmp / "run/ckpt_6.dflm", "--ref", tmp / "run/ref.csv", "--out",
                            tmp / "report.json", "--eval-n", "17"});
    ASSERT_EQ(e.rc, 0) << e.err;
    const auto report = json::parse(read_file(tmp / "report.json"));
    EXPECT_NEAR(report["rel_l2"].get<double>(), manifest["final_rel_l2"].get<double>(), 1e-12);
    EXPECT_TRUE(fs::exists(tmp.path() / "pointwise.csv"));
}

TEST(Cli, TrialsGetDerivedSeeds) {
    TempDir tmp;
    auto j = tiny_config();
    j["iterations"] = 3;
    write_file(tmp / "tiny.json", j.dump());
    const auto c = run_cli({"train", "--config", tmp / "tiny.json", "--out", tmp / "run", "--trials", "2", "--threads", "1"});
    ASSERT_EQ(c.rc, 0) << c.err;
    EXPECT_TRUE(fs::exists(tmp.path() / "run/trial_0/metrics.csv"));
    EXPECT_TRUE(fs::exists(tmp.path() / "run/trial_1/metrics.csv"));
    EXPECT_TRUE(fs::exists(tmp.path() / "run/metrics.csv"));
    const auto manifest = json::parse(read_file(tmp / "run/run.json"));
    EXPECT_EQ(manifest["trial_seeds"][0], 1);
    EXPECT_NE(manifest["trial_seeds"][1], 1);
}

TEST(Cli, AbortWritesOffendingBatch) {
    TempDir tmp;
    auto j = tiny_config();
    j["discount_clamp"] = -1.0;
    j.erase("reference_grid");
    write_file(tmp / "tiny.json", j.dump());
    const auto c = run_cli({"train", "--config", tmp / "tiny.json", "--out", tmp / "run"});
    EXPECT_EQ(c.rc, cli::kExitAborted);
    const auto batch = json::parse(read_file(tmp / "run/aborted_batch.json"));
    EXPECT_EQ(batch["iteration"], 1);
    EXPECT_EQ(batch["interior"].size(), 20u);
}

TEST(Cli, ReferenceAndFieldOutputs) {
    TempDir tmp;
    write_file(tmp / "tiny.json", tiny_config().dump());
    ASSERT_EQ(run_cli({"reference", "--config", tmp / "tiny.json", "--grid", "33", "--out", tmp / "ref.csv"}).rc, 0);
    const auto g = read_grid_csv(tmp / "ref.csv");
    EXPECT_EQ(g.n, 33u);
    EXPECT_GT(g.at(16, 16), 0.0);

    const auto f = run_cli({"field", "--config", (kPresets / "randfield.json").string(), "--grid", "512", "--out",
                            tmp / "a.csv", "--field-json", tmp / "field.json"});
    ASSERT_EQ(f.rc, 0) << f.err;
    const auto a = read_grid_csv(tmp / "a.csv");
    double mn = 1e300;
    for (double v : a.values) mn = std::min(mn, v);
    EXPECT_GT(mn, 0.05);
    const auto params = random_field_params_from_json(json::parse(read_file(tmp / "field.json")));
    EXPECT_EQ(params.seed, 7u);
}

TEST(Cli, FkEstimate) {
    TempDir tmp;
    auto j = tiny_config();
    j["problem"] = json::parse(R"({"model": "constant", "eps": 0.1, "value": 1, "f": 0, "g": "x1"})");
    write_file(tmp / "h.json", j.dump());
    const auto c = run_cli({"fk", "--config", tmp / "h.json", "--x1", "0.3", "--x2", "0.6", "--samples", "2000", "--dt",
                            "1e-4", "--seed", "3"});
    ASSERT_EQ(c.rc, 0) << c.err;
    const auto r = json::parse(c.out);
    EXPECT_LE(std::abs(r["mean"].get<double>() - 0.3), 3.0 * r["std_error"].get<double>() + 5e-3);
}
