#pragma once

// 3D contextual transformer block.
//
//   K1 = conv_kxkxk(X)                 static context (keys are X itself)
//   V  = conv_1x1x1(X)                 values
//   A  = conv_1x1x1(conv_1x1x1([K1, X]))   attention, queries are X itself
//   K2 = V (.) A                        dynamic context, elementwise
//   Y  = K1 + K2
//
// No normalisation or activation inside the block.

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "cotunet/ops.hpp"
#include "cotunet/random.hpp"

namespace cotunet {

template <typename T>
struct CoTParams {
    ConvParams3D<T> w_key;    // C -> C, k x k x k
    ConvParams3D<T> w_value;  // C -> C, 1 x 1 x 1
    ConvParams3D<T> w_theta;  // 2C -> C, 1 x 1 x 1
    ConvParams3D<T> w_delta;  // C -> C, 1 x 1 x 1
    int k = 3;

    [[nodiscard]] int channels() const { return w_value.out_ch; }

    static CoTParams zeros(int channels, int k = 3) {
        if (channels < 1) throw std::invalid_argument("CoTParams: channels must be >= 1");
        if (k <= 0 || k % 2 == 0)
            throw std::invalid_argument("CoTParams: key kernel size must be odd and positive, got " +
                                        std::to_string(k));
        CoTParams p;
        p.k = k;
        p.w_key = ConvParams3D<T>::same(channels, channels, k);
        p.w_value = ConvParams3D<T>::same(channels, channels, 1);
        p.w_theta = ConvParams3D<T>::same(channels, 2 * channels, 1);
        p.w_delta = ConvParams3D<T>::same(channels, channels, 1);
        return p;
    }

    [[nodiscard]] CoTParams zeros_like() const {
        CoTParams g = *this;
        g.w_key = w_key.zeros_like();
        g.w_value = w_value.zeros_like();
        g.w_theta = w_theta.zeros_like();
        g.w_delta = w_delta.zeros_like();
        return g;
    }

    /// Parameter tensors in canonical order.
    template <typename F>
    void for_each_tensor(F&& f) {
        for (ConvParams3D<T>* c : {&w_key, &w_value, &w_theta, &w_delta}) {
            f(std::span<T>(c->weight));
            f(std::span<T>(c->bias));
        }
    }
};

/// He-initialised CoT parameters, deterministic per seed.
template <typename T>
CoTParams<T> cot_init(int channels, int k, std::uint64_t seed) {
    CoTParams<T> p = CoTParams<T>::zeros(channels, k);
    he_init(p.w_key, derive_seed(seed, 0));
    he_init(p.w_value, derive_seed(seed, 1));
    he_init(p.w_theta, derive_seed(seed, 2));
    he_init(p.w_delta, derive_seed(seed, 3));
    return p;
}

/// Intermediate activations kept for the backward pass. Keys and queries are
/// the block input `x`.
template <typename T>
struct CoTTrace {
    Tensor5<T> x;
    Tensor5<T> k1;
    Tensor5<T> v;
    Tensor5<T> keys_queries;  // concat(K1, Q)
    Tensor5<T> theta;
    Tensor5<T> a;
    Tensor5<T> k2;
};

template <typename T>
struct CoTForward {
    Tensor5<T> y;
    CoTTrace<T> trace;
};

template <typename T>
CoTForward<T> cot_forward(const Tensor5<T>& x, const CoTParams<T>& p) {
    if (x.shape().c != p.channels())
        throw std::invalid_argument("cot_forward: input has " + std::to_string(x.shape().c) +
                                    " channels, block expects " + std::to_string(p.channels()));
    CoTForward<T> r;
    auto& t = r.trace;
    t.x = x;
    t.k1 = conv3d(x, p.w_key);
    t.v = conv3d(x, p.w_value);
    t.keys_queries = concat_channels(t.k1, x);
    t.theta = conv3d(t.keys_queries, p.w_theta);
    t.a = conv3d(t.theta, p.w_delta);
    t.k2 = multiply(t.v, t.a);
    r.y = add(t.k1, t.k2);
    return r;
}

template <typename T>
struct CoTGrad {
    Tensor5<T> dx;
    CoTParams<T> dp;
};

template <typename T>
CoTGrad<T> cot_backward(const Tensor5<T>& dy, const CoTTrace<T>& t, const CoTParams<T>& p) {
    require_same_shape(dy.shape(), t.k1.shape(), "cot_backward: dy vs block output");
    CoTGrad<T> g;
    g.dp = p.zeros_like();

    // y = K1 + V (.) A
    Tensor5<T> dk1 = dy;
    const Tensor5<T> dv = multiply(dy, t.a);
    const Tensor5<T> da = multiply(dy, t.v);

    auto delta = conv3d_grad(t.theta, p.w_delta, da);
    g.dp.w_delta = std::move(delta.dp);
    auto theta = conv3d_grad(t.keys_queries, p.w_theta, delta.dx);
    g.dp.w_theta = std::move(theta.dp);
    auto [dk1_from_attn, dq] = split_channels(theta.dx, p.channels());
    accumulate(dk1, dk1_from_attn);

    auto value = conv3d_grad(t.x, p.w_value, dv);
    g.dp.w_value = std::move(value.dp);
    auto key = conv3d_grad(t.x, p.w_key, dk1);
    g.dp.w_key = std::move(key.dp);

    g.dx = std::move(dq);
    accumulate(g.dx, value.dx);
    accumulate(g.dx, key.dx);
    return g;
}

}  // namespace cotunet
