#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <iomanip>
#include <limits>
#include <map>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "dflm/core.hpp"
#include "dflm/field.hpp"
#include "dflm/parallel.hpp"
#include "dflm/problem.hpp"

namespace dflm {

/// Node values on an n x n grid including the boundary; values[j * n + i] sits at
/// (lower1 + i * h1, lower2 + j * h2).
struct GridField {
    std::size_t n = 0;
    Domain domain = Domain::unit();
    std::vector<double> values;

    GridField() = default;
    GridField(std::size_t n_, const Domain& d) : n(n_), domain(d), values(n_ * n_, 0.0) {
        if (n_ < 3) throw std::invalid_argument("GridField: n must be >= 3");
    }

    double spacing(std::size_t axis) const { return domain.extent(axis) / static_cast<double>(n - 1); }
    Point2 node(std::size_t i, std::size_t j) const {
        return {domain.lower[0] + static_cast<double>(i) * spacing(0), domain.lower[1] + static_cast<double>(j) * spacing(1)};
    }
    double& at(std::size_t i, std::size_t j) { return values[j * n + i]; }
    double at(std::size_t i, std::size_t j) const { return values[j * n + i]; }

    /// Bilinear interpolation; points are clamped into the domain.
    double interpolate(const Point2& x) const {
        const double gx = std::clamp((x[0] - domain.lower[0]) / spacing(0), 0.0, static_cast<double>(n - 1));
        const double gy = std::clamp((x[1] - domain.lower[1]) / spacing(1), 0.0, static_cast<double>(n - 1));
        const auto i0 = std::min(static_cast<std::size_t>(gx), n - 2);
        const auto j0 = std::min(static_cast<std::size_t>(gy), n - 2);
        const double tx = gx - static_cast<double>(i0);
        const double ty = gy - static_cast<double>(j0);
        return (1 - tx) * (1 - ty) * at(i0, j0) + tx * (1 - ty) * at(i0 + 1, j0) + (1 - tx) * ty * at(i0, j0 + 1) +
               tx * ty * at(i0 + 1, j0 + 1);
    }
};

struct FdOptions {
    double cg_tol = 1e-10;   ///< relative residual
    long max_cg_iter = 0;    ///< 0 selects 50 * n
    int threads = 1;
};

struct FdStats {
    long cg_iterations = 0;   ///< summed over all linear solves
    int picard_iterations = 0;
    double final_residual = 0.0;
};

namespace detail {

/// Face coefficients of the 5-point flux scheme. ax[j * (n-1) + i] couples (i,j)-(i+1,j);
/// ay[j * n + i] couples (i,j)-(i,j+1).
struct FaceField {
    std::vector<double> ax;
    std::vector<double> ay;
};

inline std::vector<double> axis_nodes(double lo, double h, std::size_t count, double shift) {
    std::vector<double> v(count);
    for (std::size_t i = 0; i < count; ++i) v[i] = lo + (static_cast<double>(i) + shift) * h;
    return v;
}

/// Evaluates a spatial-only coefficient at face midpoints.
template <class PointEval>
FaceField faces_pointwise(std::size_t n, const Domain& d, PointEval&& eval) {
    const double h1 = d.extent(0) / static_cast<double>(n - 1), h2 = d.extent(1) / static_cast<double>(n - 1);
    FaceField f;
    f.ax.resize((n - 1) * n);
    f.ay.resize(n * (n - 1));
    for (std::size_t j = 0; j < n; ++j) {
        for (std::size_t i = 0; i + 1 < n; ++i) {
            f.ax[j * (n - 1) + i] = eval(Point2{d.lower[0] + (static_cast<double>(i) + 0.5) * h1, d.lower[1] + static_cast<double>(j) * h2});
        }
    }
    for (std::size_t j = 0; j + 1 < n; ++j) {
        for (std::size_t i = 0; i < n; ++i) {
            f.ay[j * n + i] = eval(Point2{d.lower[0] + static_cast<double>(i) * h1, d.lower[1] + (static_cast<double>(j) + 0.5) * h2});
        }
    }
    return f;
}

inline FaceField faces_random(std::size_t n, const Domain& d, const RandomField& field) {
    const double h1 = d.extent(0) / static_cast<double>(n - 1), h2 = d.extent(1) / static_cast<double>(n - 1);
    FaceField f;
    const auto xm = axis_nodes(d.lower[0], h1, n - 1, 0.5);
    const auto xn = axis_nodes(d.lower[0], h1, n, 0.0);
    const auto ym = axis_nodes(d.lower[1], h2, n - 1, 0.5);
    const auto yn = axis_nodes(d.lower[1], h2, n, 0.0);
    f.ax = field.tensor(xm, yn, false).a; // (n-1) x n, index j*(n-1)+i
    f.ay = field.tensor(xn, ym, false).a; // n x (n-1), index j*n+i
    return f;
}

/// Spatial coefficient (or alpha for the nonlinear model) on faces.
inline FaceField spatial_faces(const CoefficientModel& model, std::size_t n, const Domain& d) {
    return std::visit(
        [&](const auto& m) -> FaceField {
            using M = std::decay_t<decltype(m)>;
            if constexpr (std::is_same_v<M, RandomFieldCoefficient>) {
                return faces_random(n, d, *m.field);
            } else if constexpr (std::is_same_v<M, NonlinearPeriodic>) {
                const auto alpha = m.alpha();
                return faces_pointwise(n, d, [&](const Point2& x) { return alpha(x).a; });
            } else {
                return faces_pointwise(n, d, [&](const Point2& x) { return m(x).a; });
            }
        },
        model);
}

/// Matrix-free SPD operator of the flux scheme on interior nodes, Jacobi-preconditioned CG.
class FluxOperator {
public:
    FluxOperator(std::size_t n, const Domain& d, const FaceField& faces, int threads)
        : n_(n), faces_(faces), threads_(threads) {
        const double h1 = d.extent(0) / static_cast<double>(n - 1), h2 = d.extent(1) / static_cast<double>(n - 1);
        c1_ = 1.0 / (h1 * h1);
        c2_ = 1.0 / (h2 * h2);
        diag_.assign(n * n, 1.0);
        for (std::size_t j = 1; j + 1 < n; ++j) {
            for (std::size_t i = 1; i + 1 < n; ++i) {
                const double d0 = c1_ * (ax(i, j) + ax(i - 1, j)) + c2_ * (ay(i, j) + ay(i, j - 1));
                if (!(d0 > 0.0) || !std::isfinite(d0)) throw NumericalError("FD operator: non-positive face coefficient");
                diag_[j * n + i] = d0;
            }
        }
    }

    /// y = A x on interior nodes; boundary entries of x are used as given (Dirichlet data).
    void apply(const std::vector<double>& x, std::vector<double>& y) const {
        const std::size_t n = n_;
        parallel_for_chunks(n - 2, 16, threads_, [&](std::size_t b, std::size_t e) {
            for (std::size_t j = b + 1; j < e + 1; ++j) {
                for (std::size_t i = 1; i + 1 < n; ++i) {
                    const double u = x[j * n + i];
                    y[j * n + i] = c1_ * (ax(i, j) * (u - x[j * n + i + 1]) + ax(i - 1, j) * (u - x[j * n + i - 1])) +
                                   c2_ * (ay(i, j) * (u - x[(j + 1) * n + i]) + ay(i, j - 1) * (u - x[(j - 1) * n + i]));
                }
            }
        });
    }

    double interior_dot(const std::vector<double>& a, const std::vector<double>& b) const {
        const std::size_t n = n_;
        std::vector<double> rows(n, 0.0);
        parallel_for_chunks(n - 2, 16, threads_, [&](std::size_t bb, std::size_t e) {
            for (std::size_t j = bb + 1; j < e + 1; ++j) {
                double s = 0.0;
                for (std::size_t i = 1; i + 1 < n; ++i) s += a[j * n + i] * b[j * n + i];
                rows[j] = s;
            }
        });
        double s = 0.0;
        for (double r : rows) s += r;
        return s;
    }

    /// Solves A u = f on the interior with u's boundary entries fixed; u holds the initial
    /// guess on entry. Returns iterations used.
    long solve(const std::vector<double>& f, std::vector<double>& u, double tol, long max_iter, double* residual) const {
        const std::size_t n = n_;
        std::vector<double> r(n * n, 0.0), z(n * n, 0.0), p(n * n, 0.0), q(n * n, 0.0);
        apply(u, q);
        for (std::size_t j = 1; j + 1 < n; ++j) {
            for (std::size_t i = 1; i + 1 < n; ++i) r[j * n + i] = f[j * n + i] - q[j * n + i];
        }
        std::vector<double> fi(n * n, 0.0);
        for (std::size_t j = 1; j + 1 < n; ++j) {
            for (std::size_t i = 1; i + 1 < n; ++i) fi[j * n + i] = f[j * n + i];
        }
        // Reference norm: the right-hand side including Dirichlet contributions.
        std::vector<double> u0(u.size(), 0.0);
        for (std::size_t k = 0; k < n; ++k) {
            u0[k] = u[k];
            u0[(n - 1) * n + k] = u[(n - 1) * n + k];
            u0[k * n] = u[k * n];
            u0[k * n + n - 1] = u[k * n + n - 1];
        }
        apply(u0, q);
        for (std::size_t j = 1; j + 1 < n; ++j) {
            for (std::size_t i = 1; i + 1 < n; ++i) fi[j * n + i] -= q[j * n + i];
        }
        double bnorm = std::sqrt(interior_dot(fi, fi));
        if (bnorm == 0.0) bnorm = 1.0;

        double rnorm = std::sqrt(interior_dot(r, r));
        if (residual) *residual = rnorm / bnorm;
        if (rnorm / bnorm <= tol) return 0;

        for (std::size_t k = 0; k < n * n; ++k) z[k] = r[k] / diag_[k];
        p = z;
        double rz = interior_dot(r, z);
        for (long it = 1; it <= max_iter; ++it) {
            apply(p, q);
            const double alpha = rz / interior_dot(p, q);
            for (std::size_t j = 1; j + 1 < n; ++j) {
                for (std::size_t i = 1; i + 1 < n; ++i) {
                    const std::size_t k = j * n + i;
                    u[k] += alpha * p[k];
                    r[k] -= alpha * q[k];
                }
            }
            rnorm = std::sqrt(interior_dot(r, r));
            if (residual) *residual = rnorm / bnorm;
            if (!std::isfinite(rnorm)) throw NumericalError("CG: residual became non-finite");
            if (rnorm / bnorm <= tol) return it;
            for (std::size_t k = 0; k < n * n; ++k) z[k] = r[k] / diag_[k];
            const double rz_new = interior_dot(r, z);
            const double beta = rz_new / rz;
            rz = rz_new;
            for (std::size_t j = 1; j + 1 < n; ++j) {
                for (std::size_t i = 1; i + 1 < n; ++i) {
                    const std::size_t k = j * n + i;
                    p[k] = z[k] + beta * p[k];
                }
            }
        }
        throw ConvergenceError("CG did not reach relative residual " + std::to_string(tol) + " within " +
                               std::to_string(max_iter) + " iterations");
    }

private:
    double ax(std::size_t i, std::size_t j) const { return faces_.ax[j * (n_ - 1) + i]; }
    double ay(std::size_t i, std::size_t j) const { return faces_.ay[j * n_ + i]; }

    std::size_t n_;
    const FaceField& faces_;
    int threads_;
    double c1_ = 0.0, c2_ = 0.0;
    std::vector<double> diag_;
};

inline std::vector<double> sample_force(const ProblemSpec& p, const GridField& g) {
    std::vector<double> f(g.n * g.n, 0.0);
    for (std::size_t j = 1; j + 1 < g.n; ++j) {
        for (std::size_t i = 1; i + 1 < g.n; ++i) f[j * g.n + i] = p.force(g.node(i, j));
    }
    return f;
}

inline void impose_dirichlet(const ProblemSpec& p, GridField& u) {
    const std::size_t n = u.n;
    for (std::size_t k = 0; k < n; ++k) {
        u.at(k, 0) = p.boundary(u.node(k, 0));
        u.at(k, n - 1) = p.boundary(u.node(k, n - 1));
        u.at(0, k) = p.boundary(u.node(0, k));
        u.at(n - 1, k) = p.boundary(u.node(n - 1, k));
    }
}

inline void require_dirichlet(const ProblemSpec& p) {
    for (auto f : p.bc.faces) {
        if (f != BoundaryKind::Dirichlet) throw std::invalid_argument("FD reference solver supports Dirichlet faces only");
    }
}

} // namespace detail

/// Conservative 5-point finite-difference solution of -div(a grad u) = f for a linear
/// coefficient; face coefficients are evaluated at edge midpoints.
inline GridField solve_linear_fd(const ProblemSpec& problem, std::size_t n, const FdOptions& opt = {},
                                 FdStats* stats = nullptr) {
    if (problem.nonlinear()) throw std::invalid_argument("solve_linear_fd: coefficient depends on u");
    detail::require_dirichlet(problem);
    GridField u(n, problem.domain);
    detail::impose_dirichlet(problem, u);
    const auto faces = detail::spatial_faces(problem.coefficient, n, problem.domain);
    const detail::FluxOperator op(n, problem.domain, faces, opt.threads);
    const auto f = detail::sample_force(problem, u);
    double res = 0.0;
    const long iters = op.solve(f, u.values, opt.cg_tol, opt.max_cg_iter > 0 ? opt.max_cg_iter : 50 * static_cast<long>(n), &res);
    if (stats) {
        stats->cg_iterations += iters;
        stats->final_residual = res;
    }
    return u;
}

/// Picard iteration for a = 1 + alpha(x) u^2: freeze a at the current iterate (face
/// value from the mean of the two node values), solve, repeat until the relative change
/// drops below picard_tol.
inline GridField solve_nonlinear_fd(const ProblemSpec& problem, std::size_t n, double picard_tol = 1e-8,
                                    int max_picard = 100, const FdOptions& opt = {}, FdStats* stats = nullptr) {
    if (!std::holds_alternative<NonlinearPeriodic>(problem.coefficient)) {
        throw std::invalid_argument("solve_nonlinear_fd: expected the nonlinear periodic coefficient");
    }
    detail::require_dirichlet(problem);
    const auto alpha = detail::spatial_faces(problem.coefficient, n, problem.domain);
    GridField u(n, problem.domain);
    detail::impose_dirichlet(problem, u);
    const auto f = detail::sample_force(problem, u);
    const long max_iter = opt.max_cg_iter > 0 ? opt.max_cg_iter : 50 * static_cast<long>(n);

    detail::FaceField faces;
    faces.ax.resize(alpha.ax.size());
    faces.ay.resize(alpha.ay.size());
    for (int k = 1; k <= max_picard; ++k) {
        for (std::size_t j = 0; j < n; ++j) {
            for (std::size_t i = 0; i + 1 < n; ++i) {
                const double um = 0.5 * (u.at(i, j) + u.at(i + 1, j));
                faces.ax[j * (n - 1) + i] = 1.0 + alpha.ax[j * (n - 1) + i] * um * um;
            }
        }
        for (std::size_t j = 0; j + 1 < n; ++j) {
            for (std::size_t i = 0; i < n; ++i) {
                const double um = 0.5 * (u.at(i, j) + u.at(i, j + 1));
                faces.ay[j * n + i] = 1.0 + alpha.ay[j * n + i] * um * um;
            }
        }
        const detail::FluxOperator op(n, problem.domain, faces, opt.threads);
        std::vector<double> next = u.values;
        double res = 0.0;
        const long iters = op.solve(f, next, opt.cg_tol, max_iter, &res);
        double diff = 0.0, norm = 0.0;
        for (std::size_t q = 0; q < next.size(); ++q) {
            diff += (next[q] - u.values[q]) * (next[q] - u.values[q]);
            norm += u.values[q] * u.values[q];
        }
        u.values = std::move(next);
        if (stats) {
            stats->cg_iterations += iters;
            stats->picard_iterations = k;
            stats->final_residual = res;
        }
        if (diff == 0.0 || (norm > 0.0 && std::sqrt(diff / norm) < picard_tol)) return u;
    }
    throw ConvergenceError("Picard iteration did not converge within " + std::to_string(max_picard) + " iterations");
}

/// Linear or nonlinear solve depending on the coefficient model.
inline GridField solve_reference(const ProblemSpec& problem, std::size_t n, const FdOptions& opt = {},
                                 FdStats* stats = nullptr) {
    return problem.nonlinear() ? solve_nonlinear_fd(problem, n, 1e-8, 100, opt, stats) : solve_linear_fd(problem, n, opt, stats);
}

// ---------------------------------------------------------------------------
// Error metric

using BatchEvaluator = std::function<void(std::span<const Point2>, std::span<double>)>;

struct CrossSection {
    std::string name;               ///< horizontal (x2 = 0.5), vertical (x1 = 0.5), diagonal (x1 = x2)
    std::vector<double> arclength;  ///< distance from the section start
    std::vector<double> x1, x2;
    std::vector<double> candidate;
    std::vector<double> reference;
};

struct ErrorReport {
    double rel_l2 = 0.0;
    std::size_t eval_n = 0;
    Domain domain = Domain::unit();
    std::vector<double> pointwise; ///< |candidate - reference|, index j * eval_n + i
    std::vector<CrossSection> cross_sections;
};

inline BatchEvaluator grid_evaluator(const GridField& g) {
    return [&g](std::span<const Point2> xs, std::span<double> out) {
        for (std::size_t k = 0; k < xs.size(); ++k) out[k] = g.interpolate(xs[k]);
    };
}

inline BatchEvaluator network_evaluator(const NetworkParams& p, int threads = 1) {
    return [&p, threads](std::span<const Point2> xs, std::span<double> out) {
        const auto y = forward_batch(p, detail::as_flat(xs), threads);
        std::copy(y.begin(), y.end(), out.begin());
    };
}

/// ||candidate - reference|| / ||reference|| over an equidistant eval_n x eval_n node grid,
/// with the reference interpolated bilinearly, plus pointwise errors and three cross-sections.
inline ErrorReport relative_l2(const BatchEvaluator& candidate, const GridField& reference, std::size_t eval_n = 501) {
    if (eval_n < 2) throw std::invalid_argument("relative_l2: eval_n must be >= 2");
    if (reference.n < eval_n) throw std::invalid_argument("relative_l2: reference grid coarser than evaluation grid");
    const Domain& d = reference.domain;
    const auto coord = [&](std::size_t axis, std::size_t i) {
        return d.lower[axis] + d.extent(axis) * static_cast<double>(i) / static_cast<double>(eval_n - 1);
    };

    std::vector<Point2> pts(eval_n * eval_n);
    for (std::size_t j = 0; j < eval_n; ++j) {
        for (std::size_t i = 0; i < eval_n; ++i) pts[j * eval_n + i] = {coord(0, i), coord(1, j)};
    }
    std::vector<double> cand(pts.size());
    candidate(pts, cand);

    ErrorReport rep;
    rep.eval_n = eval_n;
    rep.domain = d;
    rep.pointwise.resize(pts.size());
    double num = 0.0, den = 0.0;
    for (std::size_t k = 0; k < pts.size(); ++k) {
        const double r = reference.interpolate(pts[k]);
        const double e = cand[k] - r;
        rep.pointwise[k] = std::abs(e);
        num += e * e;
        den += r * r;
    }
    rep.rel_l2 = den > 0.0 ? std::sqrt(num / den) : std::sqrt(num);

    const double mid1 = 0.5 * (d.lower[0] + d.upper[0]);
    const double mid2 = 0.5 * (d.lower[1] + d.upper[1]);
    const auto section = [&](std::string name, auto&& point_at) {
        CrossSection s;
        s.name = std::move(name);
        std::vector<Point2> sp(eval_n);
        for (std::size_t i = 0; i < eval_n; ++i) sp[i] = point_at(i);
        s.candidate.resize(eval_n);
        candidate(sp, s.candidate);
        for (std::size_t i = 0; i < eval_n; ++i) {
            s.x1.push_back(sp[i][0]);
            s.x2.push_back(sp[i][1]);
            s.arclength.push_back(std::hypot(sp[i][0] - sp[0][0], sp[i][1] - sp[0][1]));
            s.reference.push_back(reference.interpolate(sp[i]));
        }
        rep.cross_sections.push_back(std::move(s));
    };
    section("horizontal", [&](std::size_t i) { return Point2{coord(0, i), mid2}; });
    section("vertical", [&](std::size_t i) { return Point2{mid1, coord(1, i)}; });
    section("diagonal", [&](std::size_t i) { return Point2{coord(0, i), coord(1, i)}; });
    return rep;
}

// ---------------------------------------------------------------------------
// CSV I/O

/// Row-major CSV "x1,x2,<column>", x1 varying fastest.
inline void write_grid_csv(std::ostream& os, const GridField& g, const std::string& column = "u") {
    os << "x1,x2," << column << '\n';
    os << std::setprecision(17);
    for (std::size_t j = 0; j < g.n; ++j) {
        for (std::size_t i = 0; i < g.n; ++i) {
            const Point2 x = g.node(i, j);
            os << x[0] << ',' << x[1] << ',' << g.at(i, j) << '\n';
        }
    }
}

inline void write_grid_csv(const std::string& path, const GridField& g, const std::string& column = "u") {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot open for writing: " + path);
    write_grid_csv(os, g, column);
}

/// Reads a square node grid written by write_grid_csv (any row order).
inline GridField read_grid_csv(std::istream& is) {
    std::string line;
    if (!std::getline(is, line)) throw std::runtime_error("grid CSV: empty input");
    if (line.rfind("x1,x2,", 0) != 0) throw std::runtime_error("grid CSV: header must start with x1,x2,");
    std::vector<std::array<double, 3>> rows;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::array<double, 3> r{};
        std::istringstream ls(line);
        std::string cell;
        for (int c = 0; c < 3; ++c) {
            if (!std::getline(ls, cell, ',')) throw std::runtime_error("grid CSV: expected 3 columns");
            r[static_cast<std::size_t>(c)] = std::stod(cell);
        }
        rows.push_back(r);
    }
    const auto n = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(rows.size()))));
    if (n < 3 || n * n != rows.size()) throw std::runtime_error("grid CSV: row count is not a square >= 9");
    Domain d;
    d.lower = {std::numeric_limits<double>::infinity(), std::numeric_limits<double>::infinity()};
    d.upper = {-std::numeric_limits<double>::infinity(), -std::numeric_limits<double>::infinity()};
    for (const auto& r : rows) {
        for (std::size_t a = 0; a < 2; ++a) {
            d.lower[a] = std::min(d.lower[a], r[a]);
            d.upper[a] = std::max(d.upper[a], r[a]);
        }
    }
    d.validate();
    GridField g(n, d);
    std::vector<char> seen(n * n, 0);
    for (const auto& r : rows) {
        const auto i = static_cast<std::size_t>(std::llround((r[0] - d.lower[0]) / g.spacing(0)));
        const auto j = static_cast<std::size_t>(std::llround((r[1] - d.lower[1]) / g.spacing(1)));
        if (i >= n || j >= n || seen[j * n + i]) throw std::runtime_error("grid CSV: points do not form a regular grid");
        seen[j * n + i] = 1;
        g.at(i, j) = r[2];
    }
    return g;
}

inline GridField read_grid_csv(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open grid CSV: " + path);
    return read_grid_csv(is);
}

} // namespace dflm
