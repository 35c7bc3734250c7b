#pragma once

// Dense 3D layer kernels with analytic gradients.
//
// Every forward op is a pure function of its inputs. Work is split into
// fixed-size chunks of output voxels, so the floating-point summation order of
// any output element is independent of the thread count.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "cotunet/parallel.hpp"
#include "cotunet/tensor.hpp"

namespace cotunet {

/// Weights (out, in, kd, kh, kw), bias (out), per-axis stride and zero padding.
template <typename T>
struct ConvParams3D {
    int out_ch = 0;
    int in_ch = 0;
    std::array<int, 3> kernel{1, 1, 1};
    std::array<int, 3> stride{1, 1, 1};
    std::array<int, 3> padding{0, 0, 0};
    std::vector<T> weight;
    std::vector<T> bias;

    [[nodiscard]] int kvol() const { return kernel[0] * kernel[1] * kernel[2]; }
    [[nodiscard]] int fan_in() const { return in_ch * kvol(); }

    /// Zero-initialised k×k×k convolution with "same" padding and unit stride.
    static ConvParams3D same(int out_channels, int in_channels, int k) {
        if (k <= 0 || k % 2 == 0)
            throw std::invalid_argument("ConvParams3D::same: kernel size must be odd and positive, got " +
                                        std::to_string(k));
        if (out_channels <= 0 || in_channels <= 0)
            throw std::invalid_argument("ConvParams3D::same: channel counts must be positive");
        ConvParams3D p;
        p.out_ch = out_channels;
        p.in_ch = in_channels;
        p.kernel = {k, k, k};
        p.padding = {k / 2, k / 2, k / 2};
        p.weight.assign(std::size_t(out_channels) * in_channels * k * k * k, T(0));
        p.bias.assign(std::size_t(out_channels), T(0));
        return p;
    }

    /// Same layout, all values zero. Used as a gradient accumulator.
    [[nodiscard]] ConvParams3D zeros_like() const {
        ConvParams3D g = *this;
        std::fill(g.weight.begin(), g.weight.end(), T(0));
        std::fill(g.bias.begin(), g.bias.end(), T(0));
        return g;
    }

    void validate() const {
        if (out_ch <= 0 || in_ch <= 0) throw std::invalid_argument("ConvParams3D: channel counts must be positive");
        for (int a = 0; a < 3; ++a) {
            if (kernel[a] <= 0) throw std::invalid_argument("ConvParams3D: kernel dims must be positive");
            if (stride[a] <= 0) throw std::invalid_argument("ConvParams3D: stride must be positive");
            if (padding[a] < 0) throw std::invalid_argument("ConvParams3D: padding must be non-negative");
        }
        if (weight.size() != std::size_t(out_ch) * in_ch * kvol())
            throw std::invalid_argument("ConvParams3D: weight length " + std::to_string(weight.size()) +
                                        " does not match declared dims");
        if (bias.size() != std::size_t(out_ch))
            throw std::invalid_argument("ConvParams3D: bias length " + std::to_string(bias.size()) +
                                        " does not match out_ch " + std::to_string(out_ch));
    }
};

template <typename T>
struct ConvGrad {
    Tensor5<T> dx;
    ConvParams3D<T> dp;
};

/// Per-channel affine parameters of an instance normalisation.
template <typename T>
struct NormParams {
    std::vector<T> gamma;
    std::vector<T> beta;

    static NormParams identity(int channels) {
        return {std::vector<T>(std::size_t(channels), T(1)), std::vector<T>(std::size_t(channels), T(0))};
    }
    [[nodiscard]] NormParams zeros_like() const {
        return {std::vector<T>(gamma.size(), T(0)), std::vector<T>(beta.size(), T(0))};
    }
};

inline constexpr double kInstanceNormEps = 1e-5;

namespace detail {

inline constexpr std::int64_t kConvChunkVoxels = 4096;
static const char* const kAxisName[3] = {"depth", "height", "width"};

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;
using OStride = Eigen::OuterStride<>;

inline std::array<int, 3> conv_out_dims(const Shape5& xs, const std::array<int, 3>& k, const std::array<int, 3>& s,
                                        const std::array<int, 3>& p) {
    const int in[3] = {xs.d, xs.h, xs.w};
    std::array<int, 3> out{};
    for (int a = 0; a < 3; ++a) {
        const int span = in[a] + 2 * p[a] - k[a];
        if (span < 0)
            throw std::invalid_argument(std::string("conv3d: ") + kAxisName[a] + " axis of size " +
                                        std::to_string(in[a]) + " with padding " + std::to_string(p[a]) +
                                        " is smaller than kernel " + std::to_string(k[a]));
        out[a] = span / s[a] + 1;
    }
    return out;
}

template <typename T>
bool is_pointwise(const ConvParams3D<T>& p) {
    return p.kvol() == 1 && p.stride == std::array<int, 3>{1, 1, 1} && p.padding == std::array<int, 3>{0, 0, 0};
}

// Gathers the receptive fields of output rows [row0, row0 + nrows) into a
// (K x len) column-major matrix, len = nrows * OW, K = in_ch * kvol.
template <typename T>
void im2col_rows(const T* x, const Shape5& xs, const ConvParams3D<T>& p, const std::array<int, 3>& od,
                 std::int64_t row0, std::int64_t nrows, T* cols) {
    const int KD = p.kernel[0], KH = p.kernel[1], KW = p.kernel[2];
    const int OH = od[1], OW = od[2];
    const std::int64_t len = nrows * OW;
    const std::int64_t S = xs.spatial();
    for (int ic = 0; ic < xs.c; ++ic) {
        const T* xc = x + ic * S;
        for (int kd = 0; kd < KD; ++kd)
            for (int kh = 0; kh < KH; ++kh)
                for (int kw = 0; kw < KW; ++kw) {
                    const std::int64_t k = ((std::int64_t(ic) * KD + kd) * KH + kh) * KW + kw;
                    T* dst = cols + k * len;
                    for (std::int64_t r = 0; r < nrows; ++r) {
                        const std::int64_t row = row0 + r;
                        const int o_d = int(row / OH), o_h = int(row % OH);
                        const int id = o_d * p.stride[0] - p.padding[0] + kd;
                        const int ih = o_h * p.stride[1] - p.padding[1] + kh;
                        T* out = dst + r * OW;
                        if (id < 0 || id >= xs.d || ih < 0 || ih >= xs.h) {
                            std::fill(out, out + OW, T(0));
                            continue;
                        }
                        const T* src = xc + (std::int64_t(id) * xs.h + ih) * xs.w;
                        if (p.stride[2] == 1) {
                            const int shift = kw - p.padding[2];
                            const int lo = std::clamp(-shift, 0, OW);
                            const int hi = std::clamp(xs.w - shift, lo, OW);
                            std::fill(out, out + lo, T(0));
                            std::copy(src + lo + shift, src + hi + shift, out + lo);
                            std::fill(out + hi, out + OW, T(0));
                        } else {
                            for (int o_w = 0; o_w < OW; ++o_w) {
                                const int iw = o_w * p.stride[2] - p.padding[2] + kw;
                                out[o_w] = (iw >= 0 && iw < xs.w) ? src[iw] : T(0);
                            }
                        }
                    }
                }
    }
}

struct ChunkPlan {
    std::int64_t rows_per_chunk;
    std::int64_t chunks;
    std::int64_t total_rows;
};

inline ChunkPlan plan_chunks(const std::array<int, 3>& od) {
    const std::int64_t rows = std::int64_t(od[0]) * od[1];
    const std::int64_t per = std::max<std::int64_t>(1, kConvChunkVoxels / std::max(1, od[2]));
    return {per, (rows + per - 1) / per, rows};
}

template <typename T>
std::vector<T>& scratch() {
    thread_local std::vector<T> buf;
    return buf;
}

// Direct gather form of the input gradient; used when the transposed
// convolution shortcut does not apply (stride > 1 or padding >= kernel).
template <typename T>
Tensor5<T> conv3d_input_grad_direct(const Shape5& xs, const ConvParams3D<T>& p, const Tensor5<T>& dy) {
    Tensor5<T> dx(xs);
    const Shape5& ys = dy.shape();
    const int KD = p.kernel[0], KH = p.kernel[1], KW = p.kernel[2];
    parallel_for(std::int64_t(xs.n) * xs.c, [&](std::int64_t task) {
        const int b = int(task / xs.c), ic = int(task % xs.c);
        T* dxc = dx.channel(b, ic);
        for (int oc = 0; oc < p.out_ch; ++oc) {
            const T* dyc = dy.channel(b, oc);
            for (int kd = 0; kd < KD; ++kd)
                for (int kh = 0; kh < KH; ++kh)
                    for (int kw = 0; kw < KW; ++kw) {
                        const T wv = p.weight[(((std::size_t(oc) * p.in_ch + ic) * KD + kd) * KH + kh) * KW + kw];
                        for (int o_d = 0; o_d < ys.d; ++o_d) {
                            const int id = o_d * p.stride[0] - p.padding[0] + kd;
                            if (id < 0 || id >= xs.d) continue;
                            for (int o_h = 0; o_h < ys.h; ++o_h) {
                                const int ih = o_h * p.stride[1] - p.padding[1] + kh;
                                if (ih < 0 || ih >= xs.h) continue;
                                for (int o_w = 0; o_w < ys.w; ++o_w) {
                                    const int iw = o_w * p.stride[2] - p.padding[2] + kw;
                                    if (iw < 0 || iw >= xs.w) continue;
                                    dxc[(std::int64_t(id) * xs.h + ih) * xs.w + iw] +=
                                        wv * dyc[(std::int64_t(o_d) * ys.h + o_h) * ys.w + o_w];
                                }
                            }
                        }
                    }
        }
    });
    return dx;
}

}  // namespace detail

/// Cross-correlation of x with p's kernels plus bias.
template <typename T>
Tensor5<T> conv3d(const Tensor5<T>& x, const ConvParams3D<T>& p) {
    p.validate();
    const Shape5& xs = x.shape();
    if (xs.c != p.in_ch)
        throw std::invalid_argument("conv3d: input has " + std::to_string(xs.c) + " channels, kernel expects " +
                                    std::to_string(p.in_ch));
    const auto od = detail::conv_out_dims(xs, p.kernel, p.stride, p.padding);
    const Shape5 ys{xs.n, p.out_ch, od[0], od[1], od[2]};
    Tensor5<T> y(ys);
    const std::int64_t nvox = ys.spatial();
    const std::int64_t K = p.fan_in();
    const auto plan = detail::plan_chunks(od);
    const bool pointwise = detail::is_pointwise(p);
    Eigen::Map<const detail::Mat<T>> W(p.weight.data(), K, p.out_ch);

    parallel_for(std::int64_t(xs.n) * plan.chunks, [&](std::int64_t task) {
        const int b = int(task / plan.chunks);
        const std::int64_t chunk = task % plan.chunks;
        const std::int64_t row0 = chunk * plan.rows_per_chunk;
        const std::int64_t nrows = std::min(plan.rows_per_chunk, plan.total_rows - row0);
        const std::int64_t v0 = row0 * od[2];
        const std::int64_t len = nrows * od[2];
        const T* xb = x.channel(b, 0);
        T* yb = y.channel(b, 0);
        Eigen::Map<detail::Mat<T>, 0, detail::OStride> Y(yb + v0, len, p.out_ch, detail::OStride(nvox));
        if (pointwise) {
            Eigen::Map<const detail::Mat<T>, 0, detail::OStride> C(xb + v0, len, K, detail::OStride(xs.spatial()));
            Y.noalias() = C * W;
        } else {
            auto& cols = detail::scratch<T>();
            cols.resize(std::size_t(K * len));
            detail::im2col_rows(xb, xs, p, od, row0, nrows, cols.data());
            Eigen::Map<const detail::Mat<T>> C(cols.data(), len, K);
            Y.noalias() = C * W;
        }
        for (int oc = 0; oc < p.out_ch; ++oc) {
            T* yo = yb + oc * nvox + v0;
            const T bv = p.bias[oc];
            for (std::int64_t j = 0; j < len; ++j) yo[j] += bv;
        }
    });
    return y;
}

/// Gradients of sum(dy * conv3d(x, p)) with respect to x, weights and bias.
/// The input gradient is skipped (left empty) when need_dx is false.
template <typename T>
ConvGrad<T> conv3d_grad(const Tensor5<T>& x, const ConvParams3D<T>& p, const Tensor5<T>& dy, bool need_dx = true) {
    p.validate();
    const Shape5& xs = x.shape();
    if (xs.c != p.in_ch)
        throw std::invalid_argument("conv3d_grad: input has " + std::to_string(xs.c) + " channels, kernel expects " +
                                    std::to_string(p.in_ch));
    const auto od = detail::conv_out_dims(xs, p.kernel, p.stride, p.padding);
    const Shape5 ys{xs.n, p.out_ch, od[0], od[1], od[2]};
    require_same_shape(dy.shape(), ys, "conv3d_grad: dy vs conv3d output");

    ConvGrad<T> g;
    g.dp = p.zeros_like();
    const std::int64_t nvox = ys.spatial();
    const std::int64_t K = p.fan_in();
    const auto plan = detail::plan_chunks(od);
    const bool pointwise = detail::is_pointwise(p);
    const std::int64_t tasks = std::int64_t(xs.n) * plan.chunks;

    std::vector<detail::Mat<T>> partial(static_cast<std::size_t>(tasks));
    parallel_for(tasks, [&](std::int64_t task) {
        const int b = int(task / plan.chunks);
        const std::int64_t chunk = task % plan.chunks;
        const std::int64_t row0 = chunk * plan.rows_per_chunk;
        const std::int64_t nrows = std::min(plan.rows_per_chunk, plan.total_rows - row0);
        const std::int64_t v0 = row0 * od[2];
        const std::int64_t len = nrows * od[2];
        const T* xb = x.channel(b, 0);
        Eigen::Map<const detail::Mat<T>, 0, detail::OStride> DY(dy.channel(b, 0) + v0, len, p.out_ch,
                                                                 detail::OStride(nvox));
        if (pointwise) {
            Eigen::Map<const detail::Mat<T>, 0, detail::OStride> C(xb + v0, len, K, detail::OStride(xs.spatial()));
            partial[task].noalias() = C.transpose() * DY;
        } else {
            auto& cols = detail::scratch<T>();
            cols.resize(std::size_t(K * len));
            detail::im2col_rows(xb, xs, p, od, row0, nrows, cols.data());
            Eigen::Map<const detail::Mat<T>> C(cols.data(), len, K);
            partial[task].noalias() = C.transpose() * DY;
        }
    });
    Eigen::Map<detail::Mat<T>> DW(g.dp.weight.data(), K, p.out_ch);
    for (const auto& part : partial) DW += part;

    for (int oc = 0; oc < p.out_ch; ++oc) {
        double acc = 0.0;
        for (int b = 0; b < xs.n; ++b) {
            const T* d = dy.channel(b, oc);
            for (std::int64_t j = 0; j < nvox; ++j) acc += double(d[j]);
        }
        g.dp.bias[oc] = T(acc);
    }

    if (!need_dx) return g;

    bool transposed_ok = p.stride == std::array<int, 3>{1, 1, 1};
    for (int a = 0; a < 3; ++a) transposed_ok = transposed_ok && p.padding[a] <= p.kernel[a] - 1;
    if (!transposed_ok) {
        g.dx = detail::conv3d_input_grad_direct(xs, p, dy);
        return g;
    }
    // Unit stride: the input gradient is a convolution of dy with the
    // spatially flipped, channel-transposed kernel.
    ConvParams3D<T> flipped;
    flipped.out_ch = p.in_ch;
    flipped.in_ch = p.out_ch;
    flipped.kernel = p.kernel;
    for (int a = 0; a < 3; ++a) flipped.padding[a] = p.kernel[a] - 1 - p.padding[a];
    flipped.weight.assign(p.weight.size(), T(0));
    flipped.bias.assign(std::size_t(p.in_ch), T(0));
    const int KD = p.kernel[0], KH = p.kernel[1], KW = p.kernel[2];
    const int kv = p.kvol();
    for (int oc = 0; oc < p.out_ch; ++oc)
        for (int ic = 0; ic < p.in_ch; ++ic)
            for (int kd = 0; kd < KD; ++kd)
                for (int kh = 0; kh < KH; ++kh)
                    for (int kw = 0; kw < KW; ++kw) {
                        const int src = (kd * KH + kh) * KW + kw;
                        const int dst = ((KD - 1 - kd) * KH + (KH - 1 - kh)) * KW + (KW - 1 - kw);
                        flipped.weight[(std::size_t(ic) * p.out_ch + oc) * kv + dst] =
                            p.weight[(std::size_t(oc) * p.in_ch + ic) * kv + src];
                    }
    g.dx = conv3d(dy, flipped);
    return g;
}

template <typename T>
struct MaxPoolResult {
    Tensor5<T> y;
    std::vector<std::int64_t> argmax;  // flat input index per output element
    Shape5 input_shape;
};

/// 2×2×2 max pooling with stride 2. Ties resolve to the lowest flat index.
template <typename T>
MaxPoolResult<T> maxpool3d(const Tensor5<T>& x) {
    const Shape5& xs = x.shape();
    if (xs.d % 2 || xs.h % 2 || xs.w % 2)
        throw std::invalid_argument("maxpool3d: spatial dims " + to_string(xs) +
                                    " must be divisible by 2; pad the input first");
    MaxPoolResult<T> r;
    r.input_shape = xs;
    const Shape5 ys{xs.n, xs.c, xs.d / 2, xs.h / 2, xs.w / 2};
    r.y = Tensor5<T>(ys);
    r.argmax.assign(std::size_t(ys.numel()), 0);
    parallel_for(std::int64_t(xs.n) * xs.c, [&](std::int64_t nc) {
        const std::int64_t ibase = nc * xs.spatial();
        const std::int64_t obase = nc * ys.spatial();
        for (int d = 0; d < ys.d; ++d)
            for (int h = 0; h < ys.h; ++h)
                for (int w = 0; w < ys.w; ++w) {
                    std::int64_t best = -1;
                    T best_v{};
                    for (int dd = 0; dd < 2; ++dd)
                        for (int hh = 0; hh < 2; ++hh)
                            for (int ww = 0; ww < 2; ++ww) {
                                const std::int64_t i =
                                    ibase + ((std::int64_t(2 * d + dd) * xs.h + (2 * h + hh)) * xs.w + (2 * w + ww));
                                if (best < 0 || x[std::size_t(i)] > best_v) {
                                    best = i;
                                    best_v = x[std::size_t(i)];
                                }
                            }
                    const std::int64_t o = obase + (std::int64_t(d) * ys.h + h) * ys.w + w;
                    r.y[std::size_t(o)] = best_v;
                    r.argmax[std::size_t(o)] = best;
                }
    });
    return r;
}

template <typename T>
Tensor5<T> maxpool3d_grad(const Tensor5<T>& dy, const MaxPoolResult<T>& fwd) {
    require_same_shape(dy.shape(), fwd.y.shape(), "maxpool3d_grad");
    Tensor5<T> dx(fwd.input_shape);
    for (std::size_t o = 0; o < dy.size(); ++o) dx[std::size_t(fwd.argmax[o])] += dy[o];
    return dx;
}

struct NormCache {
    std::vector<double> mean;
    std::vector<double> inv_std;
};

template <typename T>
struct NormResult {
    Tensor5<T> y;
    NormCache cache;
};

/// Per-(instance, channel) normalisation over D·H·W voxels, population variance.
template <typename T>
NormResult<T> instance_norm3d(const Tensor5<T>& x, const NormParams<T>& p, double eps = kInstanceNormEps) {
    if (!(eps > 0)) throw std::invalid_argument("instance_norm3d: eps must be positive");
    const Shape5& xs = x.shape();
    if (int(p.gamma.size()) != xs.c || int(p.beta.size()) != xs.c)
        throw std::invalid_argument("instance_norm3d: parameter length does not match " + std::to_string(xs.c) +
                                    " channels");
    NormResult<T> r;
    r.y = Tensor5<T>(xs);
    const std::int64_t S = xs.spatial();
    r.cache.mean.assign(std::size_t(xs.n) * xs.c, 0.0);
    r.cache.inv_std.assign(std::size_t(xs.n) * xs.c, 0.0);
    parallel_for(std::int64_t(xs.n) * xs.c, [&](std::int64_t nc) {
        const int c = int(nc % xs.c);
        const T* xp = x.data() + nc * S;
        double sum = 0.0;
        for (std::int64_t i = 0; i < S; ++i) sum += double(xp[i]);
        const double mean = sum / double(S);
        double sq = 0.0;
        for (std::int64_t i = 0; i < S; ++i) {
            const double d = double(xp[i]) - mean;
            sq += d * d;
        }
        const double inv_std = 1.0 / std::sqrt(sq / double(S) + eps);
        r.cache.mean[std::size_t(nc)] = mean;
        r.cache.inv_std[std::size_t(nc)] = inv_std;
        const double g = double(p.gamma[c]), bt = double(p.beta[c]);
        T* yp = r.y.data() + nc * S;
        for (std::int64_t i = 0; i < S; ++i) yp[i] = T((double(xp[i]) - mean) * inv_std * g + bt);
    });
    return r;
}

template <typename T>
struct NormGrad {
    Tensor5<T> dx;
    NormParams<T> dp;
};

template <typename T>
NormGrad<T> instance_norm3d_grad(const Tensor5<T>& x, const NormCache& cache, const NormParams<T>& p,
                                 const Tensor5<T>& dy) {
    require_same_shape(dy.shape(), x.shape(), "instance_norm3d_grad");
    const Shape5& xs = x.shape();
    const std::int64_t S = xs.spatial();
    NormGrad<T> g;
    g.dx = Tensor5<T>(xs);
    g.dp = p.zeros_like();
    std::vector<double> dgamma(std::size_t(xs.n) * xs.c), dbeta(std::size_t(xs.n) * xs.c);
    parallel_for(std::int64_t(xs.n) * xs.c, [&](std::int64_t nc) {
        const int c = int(nc % xs.c);
        const T* xp = x.data() + nc * S;
        const T* dyp = dy.data() + nc * S;
        const double mean = cache.mean[std::size_t(nc)], inv_std = cache.inv_std[std::size_t(nc)];
        const double gm = double(p.gamma[c]);
        double sum_dy = 0.0, sum_dy_xhat = 0.0;
        for (std::int64_t i = 0; i < S; ++i) {
            const double xhat = (double(xp[i]) - mean) * inv_std;
            sum_dy += double(dyp[i]);
            sum_dy_xhat += double(dyp[i]) * xhat;
        }
        dgamma[std::size_t(nc)] = sum_dy_xhat;
        dbeta[std::size_t(nc)] = sum_dy;
        // dx = gamma * inv_std / S * (S*dy - sum(dy) - xhat * sum(dy*xhat))
        const double scale = gm * inv_std / double(S);
        T* dxp = g.dx.data() + nc * S;
        for (std::int64_t i = 0; i < S; ++i) {
            const double xhat = (double(xp[i]) - mean) * inv_std;
            dxp[i] = T(scale * (double(S) * double(dyp[i]) - sum_dy - xhat * sum_dy_xhat));
        }
    });
    for (int c = 0; c < xs.c; ++c) {
        double gg = 0.0, gb = 0.0;
        for (int b = 0; b < xs.n; ++b) {
            gg += dgamma[std::size_t(b) * xs.c + c];
            gb += dbeta[std::size_t(b) * xs.c + c];
        }
        g.dp.gamma[c] = T(gg);
        g.dp.beta[c] = T(gb);
    }
    return g;
}

template <typename T>
Tensor5<T> relu(const Tensor5<T>& x) {
    Tensor5<T> y(x.shape());
    // NaN passes through so divergence stays visible downstream
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = (x[i] > T(0) || x[i] != x[i]) ? x[i] : T(0);
    return y;
}

/// Masks dy where the forward input was <= 0 (subgradient 0 at the kink).
template <typename T>
Tensor5<T> relu_grad(const Tensor5<T>& x, const Tensor5<T>& dy) {
    require_same_shape(x.shape(), dy.shape(), "relu_grad");
    Tensor5<T> dx(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) dx[i] = x[i] > T(0) ? dy[i] : T(0);
    return dx;
}

template <typename T>
Tensor5<T> sigmoid(const Tensor5<T>& x) {
    Tensor5<T> y(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double v = double(x[i]);
        y[i] = T(v >= 0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v)));
    }
    return y;
}

/// dL/dlogit given dL/dprob and the sigmoid output.
template <typename T>
Tensor5<T> sigmoid_grad(const Tensor5<T>& y, const Tensor5<T>& dy) {
    require_same_shape(y.shape(), dy.shape(), "sigmoid_grad");
    Tensor5<T> dx(y.shape());
    for (std::size_t i = 0; i < y.size(); ++i) dx[i] = dy[i] * y[i] * (T(1) - y[i]);
    return dx;
}

namespace detail {

// Two-tap interpolation source for output index o of a x2 upsampled axis of
// input length n (half-pixel centres, no corner alignment).
struct Taps {
    int i0, i1;
    double w0, w1;
};

inline Taps upsample_taps(int o, int n) {
    double src = (o + 0.5) / 2.0 - 0.5;
    if (src < 0) src = 0;
    int i0 = int(std::floor(src));
    if (i0 > n - 1) i0 = n - 1;
    const int i1 = std::min(i0 + 1, n - 1);
    const double f = src - i0;
    return {i0, i1, 1.0 - f, f};
}

inline std::vector<Taps> taps_for(int n) {
    std::vector<Taps> t(std::size_t(2 * n));
    for (int o = 0; o < 2 * n; ++o) t[std::size_t(o)] = upsample_taps(o, n);
    return t;
}

}  // namespace detail

/// Trilinear upsampling by a factor of 2 on every spatial axis.
template <typename T>
Tensor5<T> upsample_trilinear(const Tensor5<T>& x) {
    const Shape5& xs = x.shape();
    const Shape5 ys{xs.n, xs.c, 2 * xs.d, 2 * xs.h, 2 * xs.w};
    Tensor5<T> y(ys);
    const auto td = detail::taps_for(xs.d), th = detail::taps_for(xs.h), tw = detail::taps_for(xs.w);
    parallel_for(std::int64_t(xs.n) * xs.c, [&](std::int64_t nc) {
        const T* xp = x.data() + nc * xs.spatial();
        T* yp = y.data() + nc * ys.spatial();
        for (int d = 0; d < ys.d; ++d)
            for (int h = 0; h < ys.h; ++h)
                for (int w = 0; w < ys.w; ++w) {
                    const auto& a = td[std::size_t(d)];
                    const auto& b = th[std::size_t(h)];
                    const auto& c = tw[std::size_t(w)];
                    auto at = [&](int i, int j, int k) { return double(xp[(std::int64_t(i) * xs.h + j) * xs.w + k]); };
                    const double v = a.w0 * (b.w0 * (c.w0 * at(a.i0, b.i0, c.i0) + c.w1 * at(a.i0, b.i0, c.i1)) +
                                             b.w1 * (c.w0 * at(a.i0, b.i1, c.i0) + c.w1 * at(a.i0, b.i1, c.i1))) +
                                     a.w1 * (b.w0 * (c.w0 * at(a.i1, b.i0, c.i0) + c.w1 * at(a.i1, b.i0, c.i1)) +
                                             b.w1 * (c.w0 * at(a.i1, b.i1, c.i0) + c.w1 * at(a.i1, b.i1, c.i1)));
                    yp[(std::int64_t(d) * ys.h + h) * ys.w + w] = T(v);
                }
    });
    return y;
}

/// Transpose of upsample_trilinear: scatters dy back through the interpolation weights.
template <typename T>
Tensor5<T> upsample_trilinear_grad(const Tensor5<T>& dy, const Shape5& input_shape) {
    const Shape5& xs = input_shape;
    const Shape5 ys{xs.n, xs.c, 2 * xs.d, 2 * xs.h, 2 * xs.w};
    require_same_shape(dy.shape(), ys, "upsample_trilinear_grad");
    Tensor5<T> dx(xs);
    const auto td = detail::taps_for(xs.d), th = detail::taps_for(xs.h), tw = detail::taps_for(xs.w);
    parallel_for(std::int64_t(xs.n) * xs.c, [&](std::int64_t nc) {
        std::vector<double> acc(std::size_t(xs.spatial()), 0.0);
        const T* gp = dy.data() + nc * ys.spatial();
        for (int d = 0; d < ys.d; ++d)
            for (int h = 0; h < ys.h; ++h)
                for (int w = 0; w < ys.w; ++w) {
                    const double g = double(gp[(std::int64_t(d) * ys.h + h) * ys.w + w]);
                    const auto& a = td[std::size_t(d)];
                    const auto& b = th[std::size_t(h)];
                    const auto& c = tw[std::size_t(w)];
                    const int ii[2] = {a.i0, a.i1}, jj[2] = {b.i0, b.i1}, kk[2] = {c.i0, c.i1};
                    const double wa[2] = {a.w0, a.w1}, wb[2] = {b.w0, b.w1}, wc[2] = {c.w0, c.w1};
                    for (int p = 0; p < 2; ++p)
                        for (int q = 0; q < 2; ++q)
                            for (int r = 0; r < 2; ++r)
                                acc[(std::size_t(ii[p]) * xs.h + jj[q]) * xs.w + kk[r]] += g * wa[p] * wb[q] * wc[r];
                }
        T* dxp = dx.data() + nc * xs.spatial();
        for (std::size_t i = 0; i < acc.size(); ++i) dxp[i] = T(acc[i]);
    });
    return dx;
}

/// Stacks the channels of a then b.
template <typename T>
Tensor5<T> concat_channels(const Tensor5<T>& a, const Tensor5<T>& b) {
    const Shape5 &as = a.shape(), &bs = b.shape();
    if (as.n != bs.n || as.d != bs.d || as.h != bs.h || as.w != bs.w)
        throw std::invalid_argument("concat_channels: non-channel dims differ " + to_string(as) + " vs " +
                                    to_string(bs));
    Tensor5<T> y({as.n, as.c + bs.c, as.d, as.h, as.w});
    const std::int64_t S = as.spatial();
    for (int n = 0; n < as.n; ++n) {
        std::copy(a.channel(n, 0), a.channel(n, 0) + as.c * S, y.channel(n, 0));
        std::copy(b.channel(n, 0), b.channel(n, 0) + bs.c * S, y.channel(n, as.c));
    }
    return y;
}

/// Inverse of concat_channels: first `channels_a` channels, then the rest.
template <typename T>
std::pair<Tensor5<T>, Tensor5<T>> split_channels(const Tensor5<T>& y, int channels_a) {
    const Shape5& ys = y.shape();
    if (channels_a < 0 || channels_a > ys.c)
        throw std::invalid_argument("split_channels: split point " + std::to_string(channels_a) + " outside [0," +
                                    std::to_string(ys.c) + "]");
    Tensor5<T> a({ys.n, channels_a, ys.d, ys.h, ys.w});
    Tensor5<T> b({ys.n, ys.c - channels_a, ys.d, ys.h, ys.w});
    const std::int64_t S = ys.spatial();
    for (int n = 0; n < ys.n; ++n) {
        std::copy(y.channel(n, 0), y.channel(n, 0) + channels_a * S, a.channel(n, 0));
        std::copy(y.channel(n, channels_a), y.channel(n, channels_a) + (ys.c - channels_a) * S, b.channel(n, 0));
    }
    return {std::move(a), std::move(b)};
}

template <typename T>
Tensor5<T> add(const Tensor5<T>& a, const Tensor5<T>& b) {
    require_same_shape(a.shape(), b.shape(), "add");
    Tensor5<T> y(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) y[i] = a[i] + b[i];
    return y;
}

template <typename T>
Tensor5<T> multiply(const Tensor5<T>& a, const Tensor5<T>& b) {
    require_same_shape(a.shape(), b.shape(), "multiply");
    Tensor5<T> y(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) y[i] = a[i] * b[i];
    return y;
}

template <typename T>
void accumulate(Tensor5<T>& into, const Tensor5<T>& g) {
    require_same_shape(into.shape(), g.shape(), "accumulate");
    for (std::size_t i = 0; i < g.size(); ++i) into[i] += g[i];
}

}  // namespace cotunet
