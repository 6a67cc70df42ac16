#pragma once

#include <fstream>
#include <iomanip>
#include <ostream>
#include <string>
#include <vector>

#include "json.hpp"

#include "dflm/field.hpp"
#include "dflm/refsolver.hpp"
#include "dflm/train.hpp"

namespace dflm {

inline nlohmann::json to_json(const ErrorReport& r) {
    nlohmann::json sections = nlohmann::json::array();
    for (const auto& s : r.cross_sections) {
        sections.push_back({{"name", s.name},
                            {"arclength", s.arclength},
                            {"x1", s.x1},
                            {"x2", s.x2},
                            {"candidate", s.candidate},
                            {"reference", s.reference}});
    }
    return {{"rel_l2", r.rel_l2},
            {"eval_n", r.eval_n},
            {"domain", {{"lower", r.domain.lower}, {"upper", r.domain.upper}}},
            {"cross_sections", sections}};
}

/// Pointwise |candidate - reference| on the evaluation grid, header "x1,x2,abs_error".
inline void write_pointwise_csv(const std::string& path, const ErrorReport& r) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot open for writing: " + path);
    os << "x1,x2,abs_error\n" << std::setprecision(17);
    const std::size_t n = r.eval_n;
    for (std::size_t j = 0; j < n; ++j) {
        for (std::size_t i = 0; i < n; ++i) {
            const double x1 = r.domain.lower[0] + r.domain.extent(0) * static_cast<double>(i) / static_cast<double>(n - 1);
            const double x2 = r.domain.lower[1] + r.domain.extent(1) * static_cast<double>(j) / static_cast<double>(n - 1);
            os << x1 << ',' << x2 << ',' << r.pointwise[j * n + i] << '\n';
        }
    }
}

inline constexpr const char* kMetricsHeader = "iteration,loss_interior,loss_boundary,lr,rel_l2,wall_ms";

/// One metrics.csv row; rel_l2 is empty on iterations without an evaluation.
inline void write_metrics_row(std::ostream& os, const IterationRecord& r) {
    os << r.iteration << ',' << std::setprecision(17) << r.loss_interior << ',' << r.loss_boundary << ',' << r.lr << ',';
    if (r.rel_l2) os << *r.rel_l2;
    os << ',' << std::setprecision(6) << std::fixed << r.wall_ms << std::defaultfloat << '\n';
}

inline nlohmann::json to_json(const RandomFieldParams& p) {
    return {{"seed", p.seed}, {"kmax", p.kmax}, {"decay_exp", p.decay_exp}, {"offset", p.offset}, {"scale", p.scale}};
}

inline RandomFieldParams random_field_params_from_json(const nlohmann::json& j) {
    RandomFieldParams p;
    p.seed = j.at("seed").get<std::uint64_t>();
    p.kmax = j.at("kmax").get<int>();
    p.decay_exp = j.at("decay_exp").get<double>();
    p.offset = j.value("offset", p.offset);
    p.scale = j.value("scale", p.scale);
    return p;
}

} // namespace dflm
