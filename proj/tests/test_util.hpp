#pragma once

// Test-only helpers: seeded random fills and reference implementations that
// share no code with the library kernels.

#include <cstdint>
#include <random>
#include <vector>

#include "cotunet/ops.hpp"

namespace cotunet::test {

template <typename T>
Tensor5<T> random_tensor(Shape5 s, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(lo, hi);
    Tensor5<T> t(s);
    for (auto& v : t.storage()) v = T(u(rng));
    return t;
}

/// Values bounded away from zero by `gap`, for kink-free relu checks.
template <typename T>
Tensor5<T> random_tensor_away_from_zero(Shape5 s, std::uint64_t seed, double gap) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(gap, 1.0);
    std::bernoulli_distribution sign(0.5);
    Tensor5<T> t(s);
    for (auto& v : t.storage()) v = T(sign(rng) ? u(rng) : -u(rng));
    return t;
}

template <typename T>
void randomize(ConvParams3D<T>& p, std::uint64_t seed, double scale = 0.5) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(-scale, scale);
    for (auto& v : p.weight) v = T(u(rng));
    for (auto& v : p.bias) v = T(u(rng));
}

template <typename T>
std::vector<T> random_vector(std::size_t n, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(lo, hi);
    std::vector<T> v(n);
    for (auto& x : v) x = T(u(rng));
    return v;
}

/// Seven nested loops, accumulation in double.
template <typename T>
Tensor5<double> naive_conv3d(const Tensor5<T>& x, const ConvParams3D<T>& p) {
    const Shape5& xs = x.shape();
    const int od = (xs.d + 2 * p.padding[0] - p.kernel[0]) / p.stride[0] + 1;
    const int oh = (xs.h + 2 * p.padding[1] - p.kernel[1]) / p.stride[1] + 1;
    const int ow = (xs.w + 2 * p.padding[2] - p.kernel[2]) / p.stride[2] + 1;
    Tensor5<double> y({xs.n, p.out_ch, od, oh, ow});
    for (int n = 0; n < xs.n; ++n)
        for (int oc = 0; oc < p.out_ch; ++oc)
            for (int z = 0; z < od; ++z)
                for (int yy = 0; yy < oh; ++yy)
                    for (int xx = 0; xx < ow; ++xx) {
                        double acc = double(p.bias[std::size_t(oc)]);
                        for (int ic = 0; ic < p.in_ch; ++ic)
                            for (int kd = 0; kd < p.kernel[0]; ++kd)
                                for (int kh = 0; kh < p.kernel[1]; ++kh)
                                    for (int kw = 0; kw < p.kernel[2]; ++kw) {
                                        const int iz = z * p.stride[0] - p.padding[0] + kd;
                                        const int iy = yy * p.stride[1] - p.padding[1] + kh;
                                        const int ix = xx * p.stride[2] - p.padding[2] + kw;
                                        if (iz < 0 || iy < 0 || ix < 0 || iz >= xs.d || iy >= xs.h || ix >= xs.w)
                                            continue;
                                        const std::size_t wi =
                                            ((std::size_t(oc) * p.in_ch + ic) * p.kernel[0] + kd) * p.kernel[1] * p.kernel[2] +
                                            std::size_t(kh) * p.kernel[2] + kw;
                                        acc += double(p.weight[wi]) * double(x(n, ic, iz, iy, ix));
                                    }
                        y(n, oc, z, yy, xx) = acc;
                    }
    return y;
}

/// sum(r * y) in double; the scalar used to probe layer gradients.
template <typename T>
double weighted_sum(const Tensor5<T>& y, const std::vector<T>& r) {
    double s = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) s += double(y[i]) * double(r[i]);
    return s;
}

}  // namespace cotunet::test
