#include <gtest/gtest.h>

#include <cmath>
#include <sstream>
#include <vector>

#include "dflm/nn.hpp"

#include "support.hpp"

using namespace dflm;

namespace {

NetworkParams random_net(const std::vector<std::size_t>& dims, Activation act, std::uint64_t seed) {
    RngStream rng(seed, 0, StreamTag::Init);
    auto p = init_glorot(dims, act, rng);
    RngStream b(seed, 1, StreamTag::Init);
    for (auto& l : p.layers) {
        for (auto& v : l.bias) v = 0.3 * b.normal();
    }
    return p;
}

double weighted_sum(const NetworkParams& p, const std::vector<double>& xs, const std::vector<double>& w) {
    const auto u = forward_batch(p, xs);
    double s = 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) s += w[i] * u[i];
    return s;
}

/// Smallest |pre-activation| over all hidden units at x.
double min_preactivation(const NetworkParams& p, const std::vector<double>& x) {
    std::vector<double> h = x;
    double mn = 1e300;
    for (std::size_t l = 0; l + 1 < p.layers.size(); ++l) {
        const auto& L = p.layers[l];
        std::vector<double> z(L.out);
        for (std::size_t r = 0; r < L.out; ++r) {
            double s = L.bias[r];
            for (std::size_t c = 0; c < L.in; ++c) s += L.weights[r * L.in + c] * h[c];
            z[r] = s;
            mn = std::min(mn, std::abs(s));
        }
        for (auto& v : z) v = std::max(v, 0.0);
        h = z;
    }
    return mn;
}

} // namespace

TEST(Init, GlorotVarianceAndZeroBias) {
    RngStream rng(1, 0, StreamTag::Init);
    const auto p = init_glorot({2, 200, 200, 1}, Activation::Relu, rng);
    const auto& W = p.layers[1].weights;
    double s = 0, ss = 0;
    for (double w : W) {
        s += w;
        ss += w * w;
    }
    const double n = static_cast<double>(W.size());
    const double var = ss / n - (s / n) * (s / n);
    EXPECT_NEAR(var, 2.0 / 400.0, 0.1 * 2.0 / 400.0);
    for (const auto& l : p.layers) {
        for (double b : l.bias) EXPECT_EQ(b, 0.0);
    }
    RngStream again(1, 0, StreamTag::Init);
    const auto q = init_glorot({2, 200, 200, 1}, Activation::Relu, again);
    EXPECT_EQ(p.layers[1].weights, q.layers[1].weights);
}

TEST(Forward, ZeroNetworkIsZero) {
    auto p = random_net({2, 16, 16, 1}, Activation::Relu, 2).zeros_like();
    const auto u = forward_batch(p, std::vector<double>{0.1, 0.2, 0.7, 0.9});
    EXPECT_EQ(u[0], 0.0);
    EXPECT_EQ(u[1], 0.0);
}

TEST(Forward, HandComputedCase) {
    NetworkParams p;
    p.dims = {1, 1, 1};
    p.activation = Activation::Relu;
    p.layers = {DenseLayer{1, 1, {2.0}, {0.0}}, DenseLayer{1, 1, {1.0}, {0.5}}};
    EXPECT_EQ(evaluate(p, std::vector<double>{3.0}), 6.5);
    EXPECT_EQ(evaluate(p, std::vector<double>{-3.0}), 0.5);
}

TEST(Forward, BatchEqualsSinglePointBitExactly) {
    for (auto act : {Activation::Relu, Activation::Tanh}) {
        const auto p = random_net({2, 200, 200, 200, 200, 1}, act, 3);
        RngStream rng(4, 0);
        std::vector<double> xs(2 * 100);
        for (auto& x : xs) x = rng.uniform();
        for (int threads : {1, 3}) {
            const auto u = forward_batch(p, xs, threads);
            for (std::size_t i = 0; i < 100; ++i) {
                ASSERT_EQ(u[i], evaluate(p, std::span<const double>(xs.data() + 2 * i, 2))) << i;
            }
        }
    }
}

TEST(Forward, LeavesParamsUnmodified) {
    const auto p = random_net({2, 8, 8, 1}, Activation::Tanh, 5);
    const auto copy = p;
    std::vector<double> xs{0.1, 0.2, 0.3, 0.4};
    (void)forward_batch(p, xs);
    (void)grad_params(p, xs, std::vector<double>{1.0, -1.0});
    (void)grad_input(p, std::vector<double>{0.1, 0.2});
    for (std::size_t l = 0; l < p.layers.size(); ++l) {
        EXPECT_EQ(p.layers[l].weights, copy.layers[l].weights);
        EXPECT_EQ(p.layers[l].bias, copy.layers[l].bias);
    }
}

TEST(GradParams, TanhMatchesFiniteDifferences) {
    const auto p = random_net({2, 8, 8, 1}, Activation::Tanh, 6);
    RngStream rng(7, 0);
    std::vector<double> xs(2 * 5), w(5);
    for (auto& x : xs) x = rng.uniform();
    for (auto& v : w) v = rng.normal();
    const auto g = grad_params(p, xs, w);
    double worst = 0.0;
    for (std::size_t l = 0; l < p.layers.size(); ++l) {
        for (int which = 0; which < 2; ++which) {
            const std::size_t count = which ? p.layers[l].bias.size() : p.layers[l].weights.size();
            for (std::size_t k = 0; k < count; ++k) {
                auto f = [&](double delta) {
                    auto q = p;
                    (which ? q.layers[l].bias : q.layers[l].weights)[k] += delta;
                    return weighted_sum(q, xs, w);
                };
                const double fd = (f(1e-6) - f(-1e-6)) / 2e-6;
                const double an = (which ? g.layers[l].bias : g.layers[l].weights)[k];
                worst = std::max(worst, test::rel_err(an, fd, 1e-6));
            }
        }
    }
    EXPECT_LE(worst, 1e-6);
}

TEST(GradParams, ReluAtKinkFreePoints) {
    const auto p = random_net({2, 16, 16, 1}, Activation::Relu, 8);
    RngStream rng(9, 0);
    std::vector<double> xs, w;
    while (w.size() < 5) {
        std::vector<double> x{rng.uniform(), rng.uniform()};
        if (min_preactivation(p, x) < 1e-3) continue;
        xs.insert(xs.end(), x.begin(), x.end());
        w.push_back(rng.normal());
    }
    const auto g = grad_params(p, xs, w);
    double worst = 0.0;
    for (std::size_t l = 0; l < p.layers.size(); ++l) {
        for (std::size_t k = 0; k < p.layers[l].weights.size(); ++k) {
            auto f = [&](double delta) {
                auto q = p;
                q.layers[l].weights[k] += delta;
                return weighted_sum(q, xs, w);
            };
            const double fd = (f(1e-7) - f(-1e-7)) / 2e-7;
            worst = std::max(worst, test::rel_err(g.layers[l].weights[k], fd, 1e-5));
        }
    }
    EXPECT_LE(worst, 1e-4);
}

TEST(GradParams, ZeroWeightsAndLinearity) {
    const auto p = random_net({2, 8, 8, 1}, Activation::Tanh, 10);
    std::vector<double> xs{0.1, 0.9, 0.4, 0.3, 0.7, 0.2};
    const auto z = grad_params(p, xs, std::vector<double>(3, 0.0));
    z.for_each([](double v) { EXPECT_EQ(v, 0.0); });

    const std::vector<double> w1{0.3, -1.2, 2.0}, w2{1.5, 0.25, -0.7};
    std::vector<double> w12(3);
    for (int i = 0; i < 3; ++i) w12[i] = w1[i] + w2[i];
    const auto g1 = grad_params(p, xs, w1), g2 = grad_params(p, xs, w2), g12 = grad_params(p, xs, w12);
    std::vector<double> a, b, c;
    g1.for_each([&](double v) { a.push_back(v); });
    g2.for_each([&](double v) { b.push_back(v); });
    g12.for_each([&](double v) { c.push_back(v); });
    for (std::size_t k = 0; k < a.size(); ++k) EXPECT_LE(test::rel_err(a[k] + b[k], c[k], 1e-12), 1e-12);
}

TEST(GradParams, ThreadCountDoesNotChangeResult) {
    const auto p = random_net({2, 32, 32, 1}, Activation::Relu, 11);
    RngStream rng(12, 0);
    std::vector<double> xs(2 * 700), w(700);
    for (auto& x : xs) x = rng.uniform();
    for (auto& v : w) v = rng.normal();
    const auto a = grad_params(p, xs, w, 1), b = grad_params(p, xs, w, 4);
    for (std::size_t l = 0; l < a.layers.size(); ++l) {
        EXPECT_EQ(a.layers[l].weights, b.layers[l].weights);
        EXPECT_EQ(a.layers[l].bias, b.layers[l].bias);
    }
}

TEST(GradInput, LinearNetworkReturnsWeights) {
    NetworkParams p;
    p.dims = {2, 1};
    p.layers = {DenseLayer{2, 1, {0.7, -1.3}, {0.2}}};
    const auto g = grad_input(p, std::vector<double>{0.4, 0.5});
    EXPECT_EQ(g[0], 0.7);
    EXPECT_EQ(g[1], -1.3);
}

TEST(GradInput, TanhMatchesFiniteDifferences) {
    const auto p = random_net({2, 8, 8, 1}, Activation::Tanh, 13);
    RngStream rng(14, 0);
    for (int k = 0; k < 100; ++k) {
        const std::vector<double> x{rng.uniform(), rng.uniform()};
        const auto g = grad_input(p, x);
        for (std::size_t i = 0; i < 2; ++i) {
            auto f = [&](double d) {
                auto y = x;
                y[i] += d;
                return evaluate(p, y);
            };
            ASSERT_LE(test::rel_err(g[i], (f(1e-6) - f(-1e-6)) / 2e-6, 1e-6), 1e-6);
        }
    }
}

TEST(GradInput, ReluDirectionalDerivative) {
    const auto p = random_net({2, 16, 16, 1}, Activation::Relu, 15);
    RngStream rng(16, 0);
    int checked = 0;
    while (checked < 50) {
        const std::vector<double> x{rng.uniform(), rng.uniform()};
        if (min_preactivation(p, x) < 1e-3) continue;
        const double theta = kTwoPi * rng.uniform();
        const double d0 = std::cos(theta), d1 = std::sin(theta);
        const auto g = grad_input(p, x);
        auto f = [&](double h) { return evaluate(p, std::vector<double>{x[0] + h * d0, x[1] + h * d1}); };
        const double fd = (f(1e-7) - f(-1e-7)) / 2e-7;
        ASSERT_LE(test::rel_err(g[0] * d0 + g[1] * d1, fd, 1e-5), 1e-4);
        ++checked;
    }
}

TEST(GradInput, BatchedValuesMatchForward) {
    const auto p = random_net({2, 32, 32, 1}, Activation::Tanh, 17);
    std::vector<double> xs{0.1, 0.2, 0.5, 0.5, 0.9, 0.05};
    std::vector<double> u(3), g(6);
    value_and_input_gradient(p, xs, u, g);
    const auto ref = forward_batch(p, xs);
    for (int i = 0; i < 3; ++i) EXPECT_EQ(u[i], ref[i]);
}

TEST(Checkpoint, RoundTripAndLayout) {
    const auto p = random_net({2, 5, 3, 1}, Activation::Tanh, 18);
    std::stringstream ss;
    write_checkpoint(ss, p);
    const std::string bytes = ss.str();
    ASSERT_EQ(bytes.substr(0, 4), "DFLM");
    EXPECT_EQ(static_cast<unsigned char>(bytes[4]), 1u); // version, little-endian
    EXPECT_EQ(static_cast<unsigned char>(bytes[8]), 1u); // tanh
    EXPECT_EQ(static_cast<unsigned char>(bytes[9]), 3u); // layer count
    const std::size_t header = 4 + 4 + 1 + 4 + 4 * 4;
    EXPECT_EQ(bytes.size(), header + 8 * p.parameter_count());
    double first = 0.0;
    std::memcpy(&first, bytes.data() + header, 8);
    EXPECT_EQ(first, p.layers[0].weights[0]);

    const auto q = read_checkpoint(ss);
    EXPECT_EQ(q.dims, p.dims);
    EXPECT_EQ(q.activation, p.activation);
    for (std::size_t l = 0; l < p.layers.size(); ++l) {
        EXPECT_EQ(q.layers[l].weights, p.layers[l].weights);
        EXPECT_EQ(q.layers[l].bias, p.layers[l].bias);
    }
}

TEST(Checkpoint, RejectsGarbage) {
    std::stringstream bad("NOPE1234");
    EXPECT_THROW(read_checkpoint(bad), std::runtime_error);
    std::stringstream truncated;
    write_checkpoint(truncated, random_net({2, 4, 1}, Activation::Relu, 1));
    std::string s = truncated.str();
    std::stringstream cut(s.substr(0, s.size() - 3));
    EXPECT_THROW(read_checkpoint(cut), std::runtime_error);
}
