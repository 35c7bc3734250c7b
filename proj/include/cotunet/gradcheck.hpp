#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

namespace cotunet {

struct GradCheckReport {
    double max_rel_error = 0.0;
    std::int64_t worst_index = -1;
    bool passed = true;
};

struct GradCheckOptions {
    double step = 1e-3;
    double tolerance = 1e-3;
    std::int64_t max_scalars = 10000;
    // Gradients below this magnitude are compared absolutely. Differences of
    // f carry about ulp(f) / step of rounding noise, so structurally zero
    // gradients need a floor well above that.
    double floor = 1e-8;
};

/// Compares an analytic gradient with central differences of f.
///
/// f maps the flat input vector to a scalar. Relative error per coordinate is
/// |a - n| / max(|a|, |n|, floor). The divisor is the step actually realised
/// in T arithmetic, so linear f is reproduced up to rounding of f itself.
/// When `coords` is non-empty only those coordinates are probed.
template <typename T, typename F>
GradCheckReport grad_check(F&& f, std::vector<T> x, std::span<const T> analytic, const GradCheckOptions& opt = {},
                           std::span<const std::int64_t> coords = {}) {
    if (analytic.size() != x.size()) throw std::invalid_argument("grad_check: gradient length differs from input");
    std::vector<std::int64_t> all;
    if (coords.empty()) {
        if (std::int64_t(x.size()) > opt.max_scalars)
            throw std::invalid_argument("grad_check: input too large for exhaustive differences");
        all.resize(x.size());
        for (std::size_t i = 0; i < x.size(); ++i) all[i] = std::int64_t(i);
        coords = all;
    }
    GradCheckReport rep;
    for (const std::int64_t i : coords) {
        const T orig = x[std::size_t(i)];
        const T up = T(orig + T(opt.step));
        const T down = T(orig - T(opt.step));
        x[std::size_t(i)] = up;
        const double fu = double(f(std::span<const T>(x)));
        x[std::size_t(i)] = down;
        const double fd = double(f(std::span<const T>(x)));
        x[std::size_t(i)] = orig;
        const double numeric = (fu - fd) / (double(up) - double(down));
        const double a = double(analytic[std::size_t(i)]);
        const double denom = std::max({std::abs(a), std::abs(numeric), opt.floor});
        const double rel = std::abs(a - numeric) / denom;
        if (!(rel <= rep.max_rel_error)) {  // also catches NaN
            rep.max_rel_error = std::isnan(rel) ? INFINITY : rel;
            rep.worst_index = i;
        }
    }
    rep.passed = rep.max_rel_error <= opt.tolerance;
    return rep;
}

}  // namespace cotunet
