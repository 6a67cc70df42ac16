#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

namespace dflm::test {

/// A printed figure like 1.10e-5 agrees with v when |v - printed| is below one unit in
/// its last printed digit (the printed figures are truncated, not rounded).
inline bool agrees_to_printed(double v, double printed, int sig = 3) {
    const double unit = std::pow(10.0, std::floor(std::log10(std::abs(printed))) - (sig - 1));
    return std::abs(v - printed) < unit;
}

inline double truncate_sig(double v, int sig) {
    const double unit = std::pow(10.0, std::floor(std::log10(std::abs(v))) - (sig - 1));
    return std::trunc(v / unit) * unit;
}

inline double rel_err(double a, double b, double floor = 1e-12) {
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

inline double central_diff(const std::function<double(double)>& f, double x, double h) {
    return (f(x + h) - f(x - h)) / (2.0 * h);
}

struct MeanSe {
    double mean = 0.0;
    double se = 0.0;
};

inline MeanSe mean_se(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    const double m = s / static_cast<double>(v.size());
    double ss = 0.0;
    for (double x : v) ss += (x - m) * (x - m);
    return {m, std::sqrt(ss / static_cast<double>(v.size() - 1) / static_cast<double>(v.size()))};
}

} // namespace dflm::test
