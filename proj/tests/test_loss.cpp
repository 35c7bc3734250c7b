#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "cotunet/gradcheck.hpp"
#include "cotunet/loss.hpp"

using namespace cotunet;

namespace {

std::vector<double> random_probs(std::size_t n, std::uint64_t seed, double lo = 0.02, double hi = 0.98) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(lo, hi);
    std::vector<double> p(n);
    for (auto& v : p) v = u(rng);
    return p;
}

std::vector<double> random_labels(std::size_t n, std::uint64_t seed, double fg = 0.3) {
    std::mt19937_64 rng(seed);
    std::bernoulli_distribution b(fg);
    std::vector<double> l(n);
    for (auto& v : l) v = b(rng) ? 1.0 : 0.0;
    return l;
}

using Span = std::span<const double>;

}  // namespace

TEST(DiceLoss, PerfectOverlapAndDisjoint) {
    const std::vector<double> l = {1, 0, 1, 1, 0, 0, 1, 0};
    EXPECT_LE(dice_loss(Span(l), Span(l)).value, 1e-6);
    const std::vector<double> p = {0, 1, 0, 0, 1, 1, 0, 1};
    EXPECT_NEAR(dice_loss(Span(p), Span(l)).value, 1.0, 1e-6);
    const std::vector<double> z(8, 0.0);
    EXPECT_EQ(dice_loss(Span(z), Span(z)).value, 0.0);
}

TEST(DiceLoss, HalfProbabilityOnHalfLabelledCube) {
    const std::vector<double> p(8, 0.5);
    const std::vector<double> l = {1, 1, 1, 1, 0, 0, 0, 0};
    // 1 - (2 * 4 * 0.5 + s) / (8 * 0.5 + 4 + s)
    const double s = 1e-6;
    const double expected = 1.0 - (4.0 + s) / (8.0 + s);
    EXPECT_NEAR(dice_loss(Span(p), Span(l), s).value, expected, 1e-15);
}

TEST(DiceLoss, RejectsMismatchAndNonBinaryLabels) {
    const std::vector<double> a(4, 0.5), b(5, 0.0), c = {0, 0.5, 1, 0};
    EXPECT_THROW(dice_loss(Span(a), Span(b)), std::invalid_argument);
    EXPECT_THROW(dice_loss(Span(a), Span(c)), std::invalid_argument);
    EXPECT_THROW(focal_loss(Span(a), Span(b)), std::invalid_argument);
}

TEST(DiceLoss, PermutationSymmetryAndRange) {
    for (int t = 0; t < 10; ++t) {
        auto p = random_probs(64, 10 + t, 0.0, 1.0);
        auto l = random_labels(64, 20 + t);
        const double v = dice_loss(Span(p), Span(l)).value;
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 1.0);
        std::vector<std::size_t> perm(64);
        std::iota(perm.begin(), perm.end(), 0);
        std::shuffle(perm.begin(), perm.end(), std::mt19937_64(30 + t));
        std::vector<double> pp(64), lp(64);
        for (std::size_t i = 0; i < 64; ++i) {
            pp[i] = p[perm[i]];
            lp[i] = l[perm[i]];
        }
        EXPECT_NEAR(dice_loss(Span(pp), Span(lp)).value, v, 1e-14);
    }
}

TEST(FocalLoss, SingleVoxelValue) {
    const std::vector<double> p = {0.5}, l = {1.0};
    const double expected = -0.25 * 0.25 * std::log(0.5);
    EXPECT_NEAR(focal_loss(Span(p), Span(l)).value, expected, 1e-15);
    EXPECT_NEAR(focal_loss(Span(p), Span(l)).value, 0.0433217, 1e-6);
}

TEST(FocalLoss, ConfidentCorrectTendsToZero) {
    const std::vector<double> l = {1, 0, 1, 0};
    double prev = INFINITY;
    for (double e : {1e-1, 1e-2, 1e-3, 1e-5}) {
        const std::vector<double> p = {1 - e, e, 1 - e, e};
        const double v = focal_loss(Span(p), Span(l)).value;
        EXPECT_LT(v, prev);
        prev = v;
    }
    EXPECT_LT(prev, 1e-12);
}

TEST(FocalLoss, GammaZeroHalfAlphaIsHalfCrossEntropy) {
    const auto p = random_probs(100, 40, 0.01, 0.99);
    const auto l = random_labels(100, 41);
    double bce = 0;
    for (std::size_t i = 0; i < p.size(); ++i) bce += -(l[i] * std::log(p[i]) + (1 - l[i]) * std::log(1 - p[i]));
    bce /= double(p.size());
    EXPECT_NEAR(focal_loss(Span(p), Span(l), 0.5, 0.0).value, 0.5 * bce, 1e-12);
}

TEST(FocalLoss, FiniteDifferences) {
    for (int t = 0; t < 10; ++t) {
        const auto p = random_probs(64, 50 + t);
        const auto l = random_labels(64, 60 + t);
        const auto g = focal_loss(Span(p), Span(l));
        auto f = [&](Span v) { return focal_loss(v, Span(l)).value; };
        const auto rep = grad_check(f, p, Span(g.gradient), {1e-6, 1e-4});
        EXPECT_TRUE(rep.passed) << rep.max_rel_error;
    }
}

TEST(TotalLoss, SumOfComponentsAndGradients) {
    const auto p = random_probs(64, 70);
    const auto l = random_labels(64, 71);
    const auto t = total_loss(Span(p), Span(l));
    const auto d = dice_loss(Span(p), Span(l));
    const auto f = focal_loss(Span(p), Span(l));
    EXPECT_EQ(t.total, d.value + f.value);
    EXPECT_EQ(t.dice, d.value);
    EXPECT_EQ(t.focal, f.value);
    for (std::size_t i = 0; i < p.size(); ++i) EXPECT_NEAR(t.gradient[i], d.gradient[i] + f.gradient[i], 1e-15);
    EXPECT_GE(t.focal, 0.0);
}

TEST(TotalLoss, FiniteDifferences) {
    for (int t = 0; t < 10; ++t) {
        const auto p = random_probs(64, 80 + t);
        const auto l = random_labels(64, 90 + t);
        const auto g = total_loss(Span(p), Span(l));
        auto f = [&](Span v) { return total_loss(v, Span(l)).total; };
        const auto dice_rep = grad_check([&](Span v) { return dice_loss(v, Span(l)).value; }, p,
                                         Span(dice_loss(Span(p), Span(l)).gradient), {1e-6, 1e-4});
        EXPECT_TRUE(dice_rep.passed) << dice_rep.max_rel_error;
        const auto rep = grad_check(f, p, Span(g.gradient), {1e-6, 1e-4});
        EXPECT_TRUE(rep.passed) << rep.max_rel_error;
    }
}

// At p = l the probabilities sit on the clamp bounds. The dice gradient points
// out of [0, 1] there, so the stationarity that holds is the projected one:
// no feasible direction decreases the loss.
TEST(TotalLoss, ProjectedGradientVanishesAtPerfectPrediction) {
    const auto l = random_labels(128, 100);
    const auto t = total_loss(Span(l), Span(l));
    for (std::size_t i = 0; i < l.size(); ++i) {
        const double g = t.gradient[i];
        const double projected = l[i] == 1.0 ? std::max(g, 0.0) : std::min(g, 0.0);
        EXPECT_LE(std::abs(projected), 1e-5);
    }
    // strictly inside the clamp interval the focal part is negligible
    std::vector<double> p(l.size());
    for (std::size_t i = 0; i < l.size(); ++i) p[i] = l[i] == 1.0 ? 1.0 - 2e-7 : 2e-7;
    const auto f = focal_loss(Span(p), Span(l));
    for (double g : f.gradient) EXPECT_LE(std::abs(g), 1e-5);
}
