#include <gtest/gtest.h>

#include "cotunet/cot3d.hpp"
#include "cotunet/gradcheck.hpp"
#include "test_util.hpp"

using namespace cotunet;
using namespace cotunet::test;

namespace {

template <typename T>
void randomize(CoTParams<T>& p, std::uint64_t seed) {
    test::randomize(p.w_key, seed, 0.3);
    test::randomize(p.w_value, seed + 1, 0.5);
    test::randomize(p.w_theta, seed + 2, 0.5);
    test::randomize(p.w_delta, seed + 3, 0.5);
}

template <typename T>
std::vector<T> flatten(CoTParams<T> p) {
    std::vector<T> out;
    p.for_each_tensor([&](std::span<T> s) { out.insert(out.end(), s.begin(), s.end()); });
    return out;
}

template <typename T>
CoTParams<T> unflatten(CoTParams<T> like, std::span<const T> flat) {
    std::size_t off = 0;
    like.for_each_tensor([&](std::span<T> s) {
        for (auto& v : s) v = flat[off++];
    });
    return like;
}

CoTParams<float> static_identity(int channels) {
    auto p = CoTParams<float>::zeros(channels, 3);
    for (int c = 0; c < channels; ++c) p.w_key.weight[(std::size_t(c) * channels + c) * 27 + 13] = 1.0f;
    return p;
}

}  // namespace

TEST(CotInit, DeterministicAndShaped) {
    const auto a = cot_init<float>(8, 3, 42);
    const auto b = cot_init<float>(8, 3, 42);
    EXPECT_EQ(flatten(a), flatten(b));
    EXPECT_NE(flatten(a), flatten(cot_init<float>(8, 3, 43)));
    EXPECT_EQ(a.w_theta.in_ch, 16);
    EXPECT_EQ(a.w_delta.out_ch, 8);
    EXPECT_EQ(a.w_key.kernel, (std::array<int, 3>{3, 3, 3}));
    EXPECT_THROW(cot_init<float>(8, 2, 1), std::invalid_argument);
    EXPECT_THROW(cot_init<float>(0, 3, 1), std::invalid_argument);
}

TEST(CotInit, HeVarianceOnKeyKernel) {
    // 20 * 20 * 27 = 10800 draws, fan-in 540
    const auto p = cot_init<double>(20, 3, 7);
    double m = 0;
    for (double w : p.w_key.weight) m += w;
    m /= double(p.w_key.weight.size());
    double v = 0;
    for (double w : p.w_key.weight) v += (w - m) * (w - m);
    v /= double(p.w_key.weight.size() - 1);
    const double expected = 2.0 / 540.0;
    EXPECT_NEAR(v / expected, 1.0, 0.2);
    for (double b : p.w_key.bias) EXPECT_EQ(b, 0.0);
}

TEST(CotForward, ZeroWeightsGiveZero) {
    const auto x = random_tensor<float>({1, 4, 5, 5, 5}, 1);
    const auto r = cot_forward(x, CoTParams<float>::zeros(4));
    for (std::size_t i = 0; i < x.size(); ++i) {
        EXPECT_EQ(r.y[i], 0.0f);
        EXPECT_EQ(r.trace.k1[i], 0.0f);
        EXPECT_EQ(r.trace.a[i], 0.0f);
        EXPECT_EQ(r.trace.k2[i], 0.0f);
    }
}

TEST(CotForward, StaticPathIdentity) {
    const auto x = random_tensor<float>({2, 3, 4, 5, 6}, 2);
    const auto r = cot_forward(x, static_identity(3));
    EXPECT_EQ(r.y.storage(), x.storage());
}

TEST(CotForward, MatchesStepByStepReference) {
    const Shape5 s{1, 4, 6, 6, 6};
    const auto x = random_tensor<double>(s, 3);
    auto p = CoTParams<double>::zeros(4);
    randomize(p, 4);
    const auto r = cot_forward(x, p);

    // Reference composed from the naive convolution and explicit loops.
    const auto k1 = naive_conv3d(x, p.w_key);
    const auto v = naive_conv3d(x, p.w_value);
    Tensor5<double> cat({1, 8, 6, 6, 6});
    for (int c = 0; c < 4; ++c)
        for (std::int64_t i = 0; i < s.spatial(); ++i) {
            cat.channel(0, c)[i] = k1.channel(0, c)[i];
            cat.channel(0, 4 + c)[i] = x.channel(0, c)[i];
        }
    const auto a = naive_conv3d(naive_conv3d(cat, p.w_theta), p.w_delta);
    for (std::size_t i = 0; i < r.y.size(); ++i) ASSERT_NEAR(r.y[i], k1[i] + v[i] * a[i], 1e-10);
}

TEST(CotForward, ShapePreservationAndDecomposition) {
    for (int t = 0; t < 5; ++t) {
        const Shape5 s{1 + t % 2, 2 + t, 3 + t, 4, 5};
        const auto x = random_tensor<float>(s, 10 + t);
        auto p = cot_init<float>(s.c, 3, 20 + t);
        const auto r = cot_forward(x, p);
        ASSERT_EQ(r.y.shape(), s);
        for (const auto* tt : {&r.trace.k1, &r.trace.v, &r.trace.a, &r.trace.k2}) ASSERT_EQ(tt->shape(), s);
        for (std::size_t i = 0; i < r.y.size(); ++i) {
            ASSERT_EQ(r.trace.k2[i], r.trace.v[i] * r.trace.a[i]);
            ASSERT_EQ(r.y[i], r.trace.k1[i] + r.trace.k2[i]);
        }
    }
}

TEST(CotForward, ZeroDynamicPathGivesStaticContext) {
    const auto x = random_tensor<float>({1, 3, 5, 5, 5}, 30);
    auto p = cot_init<float>(3, 3, 31);
    auto no_theta = p;
    no_theta.w_theta = no_theta.w_theta.zeros_like();
    auto no_delta = p;
    no_delta.w_delta = no_delta.w_delta.zeros_like();
    for (const auto& q : {no_theta, no_delta}) {
        const auto r = cot_forward(x, q);
        EXPECT_EQ(r.y.storage(), r.trace.k1.storage());
    }
}

TEST(CotForward, RejectsChannelMismatch) {
    EXPECT_THROW(cot_forward(random_tensor<float>({1, 2, 3, 3, 3}, 1), CoTParams<float>::zeros(3)),
                 std::invalid_argument);
}

TEST(CotBackward, ZeroCotangentAndIdentity) {
    const auto x = random_tensor<float>({1, 3, 4, 4, 4}, 40);
    auto p = cot_init<float>(3, 3, 41);
    const auto fwd = cot_forward(x, p);
    const auto g0 = cot_backward(Tensor5<float>(x.shape()), fwd.trace, p);
    for (float v : g0.dx.storage()) EXPECT_EQ(v, 0.0f);
    for (float v : flatten(g0.dp)) EXPECT_EQ(v, 0.0f);

    const auto id = static_identity(3);
    const auto fid = cot_forward(x, id);
    const auto dy = random_tensor<float>(x.shape(), 42);
    const auto gid = cot_backward(dy, fid.trace, id);
    EXPECT_EQ(gid.dx.storage(), dy.storage());
    EXPECT_THROW(cot_backward(Tensor5<float>({1, 3, 4, 4, 3}), fwd.trace, p), std::invalid_argument);
}

TEST(CotBackward, FiniteDifferences) {
    for (int t = 0; t < 10; ++t) {
        const Shape5 s{1, 3, 4, 4, 4};
        const auto x = random_tensor<double>(s, 100 + t);
        auto p = CoTParams<double>::zeros(3);
        randomize(p, 200 + 5 * t);
        const auto fwd = cot_forward(x, p);
        const auto r = random_vector<double>(fwd.y.size(), 300 + t);
        const auto g = cot_backward(Tensor5<double>(s, r), fwd.trace, p);

        auto fx = [&](std::span<const double> v) {
            return weighted_sum(cot_forward(Tensor5<double>(s, {v.begin(), v.end()}), p).y, r);
        };
        const auto rx = grad_check(fx, x.storage(), std::span<const double>(g.dx.storage()), {1e-3, 1e-3});
        EXPECT_TRUE(rx.passed) << "dx " << rx.max_rel_error;

        const auto flat = flatten(p);
        const auto gflat = flatten(g.dp);
        auto fp = [&](std::span<const double> v) { return weighted_sum(cot_forward(x, unflatten(p, v)).y, r); };
        const auto rp = grad_check(fp, flat, std::span<const double>(gflat), {1e-3, 1e-3});
        EXPECT_TRUE(rp.passed) << "dparams " << rp.max_rel_error << " at " << rp.worst_index;
    }
}
