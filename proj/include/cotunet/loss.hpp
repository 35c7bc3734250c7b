#pragma once

// Dice + focal training objective with analytic gradients w.r.t. the
// predicted probabilities.

#include <algorithm>
#include <cmath>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace cotunet {

struct LossOptions {
    double smooth = 1e-6;     // added to dice numerator and denominator
    double alpha = 0.25;      // foreground weight; background gets 1 - alpha
    double gamma = 2.0;       // focusing exponent
    double clamp_eps = 1e-7;  // probabilities clamped to [eps, 1 - eps] inside the log
};

template <typename T>
struct LossTerm {
    double value = 0.0;
    std::vector<T> gradient;
};

template <typename T>
struct LossValue {
    double total = 0.0;
    double dice = 0.0;
    double focal = 0.0;
    std::vector<T> gradient;
};

namespace detail {

template <typename T>
void check_loss_inputs(std::span<const T> p, std::span<const T> l, const char* what) {
    if (p.size() != l.size())
        throw std::invalid_argument(std::string(what) + ": prediction has " + std::to_string(p.size()) +
                                    " voxels, label has " + std::to_string(l.size()));
    for (const T v : l)
        if (v != T(0) && v != T(1)) throw std::invalid_argument(std::string(what) + ": labels must be 0 or 1");
}

}  // namespace detail

/// 1 - (2 sum(p l) + s) / (sum(p + l) + s)
template <typename T>
LossTerm<T> dice_loss(std::span<const T> p, std::span<const T> l, double smooth = 1e-6) {
    detail::check_loss_inputs(p, l, "dice_loss");
    double inter = 0.0, total = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        inter += double(p[i]) * double(l[i]);
        total += double(p[i]) + double(l[i]);
    }
    const double num = 2.0 * inter + smooth;
    const double den = total + smooth;
    LossTerm<T> r;
    r.value = 1.0 - num / den;
    r.gradient.resize(p.size());
    const double inv_den2 = 1.0 / (den * den);
    for (std::size_t i = 0; i < p.size(); ++i)
        r.gradient[i] = T(-(2.0 * double(l[i]) * den - num) * inv_den2);
    return r;
}

/// Mean over voxels of -alpha_t (1 - p_t)^gamma log(p_t).
template <typename T>
LossTerm<T> focal_loss(std::span<const T> p, std::span<const T> l, double alpha = 0.25, double gamma = 2.0,
                       double clamp_eps = 1e-7) {
    detail::check_loss_inputs(p, l, "focal_loss");
    LossTerm<T> r;
    r.gradient.assign(p.size(), T(0));
    if (p.empty()) return r;
    const double inv_n = 1.0 / double(p.size());
    const double lo = clamp_eps, hi = 1.0 - clamp_eps;
    double sum = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        const double raw = double(p[i]);
        const double pc = std::clamp(raw, lo, hi);
        const bool active = raw > lo && raw < hi;
        if (l[i] == T(1)) {
            const double om = 1.0 - pc;
            sum += -alpha * std::pow(om, gamma) * std::log(pc);
            if (active) {
                const double d = gamma == 0.0 ? 0.0 : -gamma * std::pow(om, gamma - 1.0) * std::log(pc);
                r.gradient[i] = T(-alpha * (d + std::pow(om, gamma) / pc) * inv_n);
            }
        } else {
            const double q = 1.0 - pc;
            sum += -(1.0 - alpha) * std::pow(pc, gamma) * std::log(q);
            if (active) {
                const double d = gamma == 0.0 ? 0.0 : gamma * std::pow(pc, gamma - 1.0) * std::log(q);
                r.gradient[i] = T(-(1.0 - alpha) * (d - std::pow(pc, gamma) / q) * inv_n);
            }
        }
    }
    r.value = sum * inv_n;
    return r;
}

template <typename T>
LossValue<T> total_loss(std::span<const T> p, std::span<const T> l, const LossOptions& opt = {}) {
    auto d = dice_loss(p, l, opt.smooth);
    auto f = focal_loss(p, l, opt.alpha, opt.gamma, opt.clamp_eps);
    LossValue<T> r;
    r.dice = d.value;
    r.focal = f.value;
    r.total = d.value + f.value;
    r.gradient = std::move(d.gradient);
    for (std::size_t i = 0; i < r.gradient.size(); ++i) r.gradient[i] += f.gradient[i];
    return r;
}

}  // namespace cotunet
