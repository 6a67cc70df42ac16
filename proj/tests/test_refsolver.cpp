#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>
#include <sstream>

#include "dflm/refsolver.hpp"

#include "support.hpp"

using namespace dflm;

namespace {

constexpr double kPi = std::numbers::pi;

double exact_u(const Point2& x) { return std::sin(kPi * x[0]) * std::sin(kPi * x[1]) + 0.5 * x[0] * x[1]; }

/// Problem whose exact solution is exact_u for the given coefficient.
ProblemSpec manufactured(CoefficientModel a) {
    ProblemSpec p;
    p.coefficient = a;
    p.boundary = exact_u;
    p.force = [a](const Point2& x) {
        const FieldEval fe = evaluate(a, x);
        const double s1 = std::sin(kPi * x[0]), c1 = std::cos(kPi * x[0]);
        const double s2 = std::sin(kPi * x[1]), c2 = std::cos(kPi * x[1]);
        const double ux = kPi * c1 * s2 + 0.5 * x[1];
        const double uy = kPi * s1 * c2 + 0.5 * x[0];
        const double lap = -2.0 * kPi * kPi * s1 * s2;
        return -(fe.a * lap + fe.grad_a_x[0] * ux + fe.grad_a_x[1] * uy);
    };
    return p;
}

double max_error(const GridField& g) {
    double e = 0.0;
    for (std::size_t j = 0; j < g.n; ++j) {
        for (std::size_t i = 0; i < g.n; ++i) e = std::max(e, std::abs(g.at(i, j) - exact_u(g.node(i, j))));
    }
    return e;
}

double observed_order(const ProblemSpec& p, std::size_t n1, std::size_t n2) {
    const double e1 = max_error(solve_linear_fd(p, n1));
    const double e2 = max_error(solve_linear_fd(p, n2));
    return std::log(e1 / e2) / std::log(static_cast<double>(n2 - 1) / static_cast<double>(n1 - 1));
}

ProblemSpec periodic_problem(double eps, double f) {
    return make_problem(PeriodicLinear{eps, 1.0, 0.9}, ScalarExpr::constant(f), ScalarExpr::constant(0.0));
}

} // namespace

TEST(FiniteDifference, SecondOrderConstantCoefficient) {
    EXPECT_GE(observed_order(manufactured(ConstantCoefficient{1.0}), 256, 512), 1.9);
}

TEST(FiniteDifference, SecondOrderVariableCoefficient) {
    EXPECT_GE(observed_order(manufactured(PeriodicLinear{0.5, 1.0, 0.9}), 256, 512), 1.9);
}

TEST(FiniteDifference, ZeroDataGivesZero) {
    const auto u = solve_linear_fd(periodic_problem(0.1, 0.0), 65);
    for (double v : u.values) EXPECT_EQ(v, 0.0);
}

TEST(FiniteDifference, ReproducesLinearFunctionExactly) {
    auto p = make_problem(PeriodicLinear{0.1, 1.0, 0.5}, ScalarExpr::constant(0.0), ScalarExpr::parse("x1"));
    p.coefficient = ConstantCoefficient{3.0};
    const auto u = solve_linear_fd(p, 33);
    for (std::size_t j = 0; j < u.n; ++j) {
        for (std::size_t i = 0; i < u.n; ++i) EXPECT_NEAR(u.at(i, j), u.node(i, j)[0], 1e-9);
    }
}

TEST(FiniteDifference, MaximumPrinciple) {
    const auto u = solve_linear_fd(periodic_problem(0.05, 10.0), 129);
    for (double v : u.values) EXPECT_GE(v, 0.0);
    const auto h = solve_linear_fd(
        make_problem(PeriodicLinear{0.05, 1.0, 0.9}, ScalarExpr::constant(0.0), ScalarExpr::parse("x1^2-x2^2")), 129);
    for (double v : h.values) {
        EXPECT_GE(v, -1.0 - 1e-9);
        EXPECT_LE(v, 1.0 + 1e-9);
    }
}

TEST(FiniteDifference, MirrorSymmetry) {
    // 1/eps is an integer, so a(x1, 1 - x2) = a(x1, x2)
    const auto u = solve_linear_fd(periodic_problem(0.05, 10.0), 201);
    double scale = 0.0;
    for (double v : u.values) scale = std::max(scale, std::abs(v));
    for (std::size_t j = 0; j < u.n; ++j) {
        for (std::size_t i = 0; i < u.n; ++i) ASSERT_NEAR(u.at(i, j), u.at(i, u.n - 1 - j), 1e-8 * scale);
    }
}

TEST(FiniteDifference, ThreadCountDoesNotChangeResult) {
    const auto p = periodic_problem(0.05, 10.0);
    FdOptions o1, o4;
    o4.threads = 4;
    EXPECT_EQ(solve_linear_fd(p, 129, o1).values, solve_linear_fd(p, 129, o4).values);
}

TEST(FiniteDifference, SelfConvergenceOnOscillatoryCoefficient) {
    const auto p = periodic_problem(0.05, 10.0);
    const auto u1 = solve_linear_fd(p, 257), u2 = solve_linear_fd(p, 513), u3 = solve_linear_fd(p, 1025);
    const auto d12 = relative_l2(grid_evaluator(u1), u3, 257).rel_l2;
    const auto d23 = relative_l2(grid_evaluator(u2), u3, 257).rel_l2;
    EXPECT_LT(d23, 1e-2);
    EXPECT_GT(d12 / d23, 3.0);
}

TEST(FiniteDifference, ReportsNonConvergence) {
    FdOptions o;
    o.max_cg_iter = 3;
    EXPECT_THROW(solve_linear_fd(periodic_problem(0.05, 10.0), 65, o), ConvergenceError);
}

TEST(FiniteDifference, RejectsNonlinearCoefficient) {
    const auto p = make_problem(NonlinearPeriodic{}, ScalarExpr::constant(50.0), ScalarExpr::constant(0.0));
    EXPECT_THROW(solve_linear_fd(p, 33), std::invalid_argument);
    EXPECT_THROW(solve_nonlinear_fd(periodic_problem(0.05, 1.0), 33), std::invalid_argument);
}

TEST(Picard, ZeroAlphaIsTheLinearSolve) {
    const auto p = make_problem(NonlinearPeriodic{0.05, 0.0, 0.0}, ScalarExpr::constant(10.0), ScalarExpr::constant(0.0));
    FdStats st;
    const auto u = solve_nonlinear_fd(p, 65, 1e-8, 100, {}, &st);
    const auto v = solve_linear_fd(make_problem(ConstantCoefficient{1.0}, ScalarExpr::constant(10.0), ScalarExpr::constant(0.0)), 65);
    EXPECT_LE(st.picard_iterations, 2);
    for (std::size_t k = 0; k < u.values.size(); ++k) EXPECT_NEAR(u.values[k], v.values[k], 1e-10);
}

TEST(Picard, ConvergesOnNonlinearProblem) {
    const auto p = make_problem(NonlinearPeriodic{0.05, 1.0, 0.9}, ScalarExpr::constant(50.0), ScalarExpr::constant(0.0));
    FdStats st;
    const auto u = solve_reference(p, 129, {}, &st);
    EXPECT_GT(st.picard_iterations, 2);
    EXPECT_LT(st.picard_iterations, 100);
    // a >= 1 everywhere, so the solution sits below the a = 1 Poisson solution
    const auto v = solve_linear_fd(make_problem(ConstantCoefficient{1.0}, ScalarExpr::constant(50.0), ScalarExpr::constant(0.0)), 129);
    double umax = 0.0, vmax = 0.0;
    for (std::size_t k = 0; k < u.values.size(); ++k) {
        EXPECT_GE(u.values[k], 0.0);
        umax = std::max(umax, u.values[k]);
        vmax = std::max(vmax, v.values[k]);
    }
    EXPECT_LT(umax, vmax);
    EXPECT_THROW(solve_nonlinear_fd(p, 65, 1e-14, 2), ConvergenceError);
}

TEST(Picard, SelfConvergence) {
    const auto p = make_problem(NonlinearPeriodic{0.05, 1.0, 0.9}, ScalarExpr::constant(50.0), ScalarExpr::constant(0.0));
    const auto u1 = solve_reference(p, 257), u2 = solve_reference(p, 513);
    EXPECT_LT(relative_l2(grid_evaluator(u1), u2, 257).rel_l2, 1e-2);
}

TEST(ErrorMetric, HandCases) {
    GridField ref(11, Domain::unit());
    for (std::size_t j = 0; j < 11; ++j) {
        for (std::size_t i = 0; i < 11; ++i) ref.at(i, j) = 1.0 + ref.node(i, j)[0];
    }
    EXPECT_NEAR(relative_l2(grid_evaluator(ref), ref, 11).rel_l2, 0.0, 1e-15);
    const BatchEvaluator twice = [&](std::span<const Point2> xs, std::span<double> out) {
        for (std::size_t k = 0; k < xs.size(); ++k) out[k] = 2.0 * ref.interpolate(xs[k]);
    };
    EXPECT_NEAR(relative_l2(twice, ref, 11).rel_l2, 1.0, 1e-14);
    const BatchEvaluator zero = [](std::span<const Point2>, std::span<double> out) { std::fill(out.begin(), out.end(), 0.0); };
    const auto rep = relative_l2(zero, ref, 6);
    EXPECT_NEAR(rep.rel_l2, 1.0, 1e-14);
    EXPECT_EQ(rep.pointwise.size(), 36u);
    EXPECT_NEAR(rep.pointwise[5], 2.0, 1e-14);
    ASSERT_EQ(rep.cross_sections.size(), 3u);
    EXPECT_EQ(rep.cross_sections[2].name, "diagonal");
    EXPECT_NEAR(rep.cross_sections[2].arclength.back(), std::sqrt(2.0), 1e-14);
    EXPECT_NEAR(rep.cross_sections[0].reference.back(), 2.0, 1e-14);
    EXPECT_THROW(relative_l2(zero, ref, 12), std::invalid_argument);
}

TEST(ErrorMetric, InterpolationIsExactForBilinear) {
    GridField g(5, Domain{{-1.0, 0.0}, {1.0, 2.0}});
    auto f = [](const Point2& x) { return 1.0 + 2.0 * x[0] - x[1] + 0.5 * x[0] * x[1]; };
    for (std::size_t j = 0; j < 5; ++j) {
        for (std::size_t i = 0; i < 5; ++i) g.at(i, j) = f(g.node(i, j));
    }
    for (const Point2& x : {Point2{0.13, 1.77}, Point2{-0.9, 0.01}, Point2{1.0, 2.0}}) EXPECT_NEAR(g.interpolate(x), f(x), 1e-14);
    EXPECT_NEAR(g.interpolate({5.0, 5.0}), f({1.0, 2.0}), 1e-14);
}

TEST(GridCsv, RoundTripIsExactInAnyRowOrder) {
    const auto u = solve_linear_fd(periodic_problem(0.1, 10.0), 17);
    std::stringstream ss;
    write_grid_csv(ss, u, "u");
    std::string header, line;
    std::getline(ss, header);
    EXPECT_EQ(header, "x1,x2,u");
    std::vector<std::string> rows;
    while (std::getline(ss, line)) rows.push_back(line);
    std::shuffle(rows.begin(), rows.end(), std::mt19937(3));
    std::stringstream shuffled;
    shuffled << header << '\n';
    for (const auto& r : rows) shuffled << r << '\n';
    const auto v = read_grid_csv(shuffled);
    EXPECT_EQ(v.n, u.n);
    EXPECT_EQ(v.values, u.values);
}

TEST(GridCsv, RejectsMalformedInput) {
    std::stringstream a("u,v,w\n");
    EXPECT_THROW(read_grid_csv(a), std::runtime_error);
    std::stringstream b("x1,x2,u\n0,0,1\n1,0,1\n0,1,1\n");
    EXPECT_THROW(read_grid_csv(b), std::runtime_error);
}
