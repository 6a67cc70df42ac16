#pragma once

#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <variant>
#include <vector>

#include "dflm/core.hpp"
#include "dflm/field.hpp"
#include "dflm/nn.hpp"
#include "dflm/sde.hpp"

namespace dflm {

using ScalarFn = std::function<double(const Point2&)>;

/// -div(a(x, u) grad u) = f in the domain, u = g on Dirichlet faces.
struct ProblemSpec {
    Domain domain = Domain::unit();
    CoefficientModel coefficient = ConstantCoefficient{1.0};
    ScalarFn force = [](const Point2&) { return 0.0; };
    ScalarFn boundary = [](const Point2&) { return 0.0; };
    BoundaryConditions<2> bc = BoundaryConditions<2>::all_dirichlet();
    std::string force_desc = "0";
    std::string boundary_desc = "0";

    bool nonlinear() const { return is_nonlinear(coefficient); }
};

inline ProblemSpec make_problem(CoefficientModel coefficient, const ScalarExpr& f, const ScalarExpr& g) {
    ProblemSpec p;
    p.coefficient = std::move(coefficient);
    p.force = f;
    p.boundary = g;
    p.force_desc = f.name();
    p.boundary_desc = g.name();
    return p;
}

// ---------------------------------------------------------------------------
// Solution views: what the integrand may ask about u.

/// Placeholder for linear problems, whose drift never depends on u.
struct NoSolution {
    void values(std::span<const Point2>, std::span<double>) const {
        throw std::logic_error("NoSolution: a solution value was requested");
    }
    void values_and_gradients(std::span<const Point2>, std::span<double>, std::span<Point2>) const {
        throw std::logic_error("NoSolution: a solution value was requested");
    }
};

namespace detail {
inline std::span<const double> as_flat(std::span<const Point2> xs) {
    static_assert(sizeof(Point2) == 2 * sizeof(double));
    return {reinterpret_cast<const double*>(xs.data()), 2 * xs.size()};
}
inline std::span<double> as_flat(std::span<Point2> xs) {
    return {reinterpret_cast<double*>(xs.data()), 2 * xs.size()};
}
} // namespace detail

/// Frozen network parameters as a solution.
struct NetworkSolution {
    const NetworkParams* params = nullptr;

    void values(std::span<const Point2> xs, std::span<double> u) const {
        auto& ws = dflm::detail::thread_workspace();
        const auto flat = detail::as_flat(xs);
        for (std::size_t b = 0; b < xs.size(); b += dflm::detail::kChunkCols) {
            const std::size_t m = std::min(dflm::detail::kChunkCols, xs.size() - b);
            dflm::detail::forward_chunk(*params, flat.data() + 2 * b, m, ws);
            for (std::size_t c = 0; c < m; ++c) u[b + c] = ws.acts.back()[c];
        }
    }
    void values_and_gradients(std::span<const Point2> xs, std::span<double> u, std::span<Point2> grad) const {
        value_and_input_gradient(*params, detail::as_flat(xs), u, detail::as_flat(grad));
    }
};

/// Closed-form solution (value and gradient callables), used to inject exact solutions.
struct FunctionSolution {
    std::function<double(const Point2&)> u;
    std::function<Point2(const Point2&)> grad;

    void values(std::span<const Point2> xs, std::span<double> out) const {
        for (std::size_t k = 0; k < xs.size(); ++k) out[k] = u(xs[k]);
    }
    void values_and_gradients(std::span<const Point2> xs, std::span<double> out, std::span<Point2> g) const {
        for (std::size_t k = 0; k < xs.size(); ++k) {
            out[k] = u(xs[k]);
            g[k] = grad ? grad(xs[k]) : Point2{0.0, 0.0};
        }
    }
};

template <class S>
concept SolutionView = requires(const S& s, std::span<const Point2> xs, std::span<double> u, std::span<Point2> g) {
    s.values(xs, u);
    s.values_and_gradients(xs, u, g);
};

// ---------------------------------------------------------------------------
// Drift-free martingale integrands: V = (grad_x a + da/du grad u) / (2a), G = -f / (2a).

template <class Model, class Solution>
struct MartingaleIntegrand {
    const Model* model = nullptr;
    const ScalarFn* force = nullptr;
    const Solution* solution = nullptr;
    std::vector<double> u;
    std::vector<Point2> grad_u;

    void operator()(std::span<const Point2> xs, std::span<Point2> drift, std::span<double> rate) {
        if constexpr (Model::nonlinear) {
            u.resize(xs.size());
            grad_u.resize(xs.size());
            solution->values_and_gradients(xs, u, grad_u);
            for (std::size_t k = 0; k < xs.size(); ++k) {
                const FieldEval fe = (*model)(xs[k], u[k]);
                const double inv = 0.5 / fe.a;
                drift[k] = {(fe.grad_a_x[0] + fe.da_du * grad_u[k][0]) * inv,
                            (fe.grad_a_x[1] + fe.da_du * grad_u[k][1]) * inv};
                rate[k] = -(*force)(xs[k]) * inv;
            }
        } else {
            for (std::size_t k = 0; k < xs.size(); ++k) {
                const FieldEval fe = (*model)(xs[k]);
                const double inv = 0.5 / fe.a;
                drift[k] = {fe.grad_a_x[0] * inv, fe.grad_a_x[1] * inv};
                rate[k] = -(*force)(xs[k]) * inv;
            }
        }
    }
};

/// Calls fn(factory) where factory() builds a fresh integrand for the problem's concrete
/// coefficient model; the variant is dispatched once, outside the walker loops.
template <class Solution, class Fn>
decltype(auto) with_integrand_factory(const ProblemSpec& problem, const Solution& solution, Fn&& fn) {
    return std::visit(
        [&](const auto& model) -> decltype(auto) {
            using Model = std::decay_t<decltype(model)>;
            auto factory = [&model, &problem, &solution] {
                return MartingaleIntegrand<Model, Solution>{&model, &problem.force, &solution, {}, {}};
            };
            return fn(factory);
        },
        problem.coefficient);
}

/// Walk-to-exit Feynman-Kac estimate of u(x). `solution` supplies u and grad u for
/// nonlinear coefficients; it is ignored otherwise.
template <class Solution = NoSolution>
FkEstimate fk_solve(const Point2& x, const ProblemSpec& problem, const FkOptions& options,
                    const Solution& solution = Solution{}) {
    return with_integrand_factory(problem, solution, [&](auto& factory) {
        return fk_walk<2>(x, problem.domain, factory, problem.boundary, options);
    });
}

} // namespace dflm
