#include <gtest/gtest.h>

#include <set>

#include "cotunet/components.hpp"
#include "cotunet/phantom.hpp"

using namespace cotunet;

TEST(PhantomTree, BranchCountsFollowBinaryTreeArithmetic) {
    for (int depth = 1; depth <= 4; ++depth) {
        PhantomSpec s;
        s.depth = depth;
        s.seed = 3;
        const auto t = generate_tree_mask(s);
        EXPECT_EQ(t.branch_count(), std::size_t((1 << depth) - 1)) << depth;
        double sum = 0;
        for (const auto& b : t.branches) {
            const double dz = b.end[0] - b.start[0], dy = b.end[1] - b.start[1], dx = b.end[2] - b.start[2];
            EXPECT_NEAR(b.length_mm, std::sqrt(dz * dz + dy * dy + dx * dx), 1e-12);
            EXPECT_NEAR(b.radius, s.radius(b.generation), 1e-12);
            if (b.parent >= 0) {
                const auto& p = t.branches[std::size_t(b.parent)];
                EXPECT_EQ(b.generation, p.generation + 1);
                EXPECT_EQ(b.start, p.end);
            }
            sum += b.length_mm;
        }
        EXPECT_DOUBLE_EQ(t.centerline_length_mm(), sum);
    }
}

TEST(PhantomTree, SolidSingleComponentInsideVolume) {
    for (std::uint64_t seed = 0; seed < 6; ++seed) {
        PhantomSpec s;
        s.depth = 4;
        s.seed = seed;
        const auto t = generate_tree_mask(s);
        EXPECT_EQ(count_components(t.airway), 1u);
        EXPECT_EQ(euler_characteristic(t.airway), 1);
        for (const auto& b : t.branches)
            for (int a = 0; a < 3; ++a) {
                EXPECT_GE(b.end[std::size_t(a)] - b.radius, 0.0);
                EXPECT_LE(b.end[std::size_t(a)] + b.radius, s.dims[a] - 1.0);
            }
    }
}

TEST(PhantomTree, LungHoldsPeripheralGenerations) {
    PhantomSpec s;
    s.depth = 3;
    s.seed = 12;
    const auto t = generate_tree_mask(s);
    ASSERT_GT(count_foreground(t.lung), 0);
    std::int64_t both = 0;
    for (std::size_t i = 0; i < t.lung.size(); ++i) both += t.lung[i] && t.airway[i];
    EXPECT_GT(both, 0);
    // the child tips lie in the lung, the trachea origin does not
    for (const auto& b : t.branches) {
        const int z = int(std::lround(b.end[0])), y = int(std::lround(b.end[1])), x = int(std::lround(b.end[2]));
        if (b.generation >= 2) EXPECT_EQ(t.lung.at(z, y, x), 1);
    }
    const auto& root = t.branches[0];
    EXPECT_EQ(t.lung.at(int(std::lround(root.start[0])), int(std::lround(root.start[1])), int(std::lround(root.start[2]))),
              0);
}

TEST(PhantomTree, DeterministicPerSeed) {
    PhantomSpec s;
    s.depth = 3;
    s.seed = 99;
    const auto a = generate_tree_mask(s), b = generate_tree_mask(s);
    EXPECT_EQ(a.airway.data, b.airway.data);
    EXPECT_EQ(a.lung.data, b.lung.data);
    s.seed = 100;
    EXPECT_NE(generate_tree_mask(s).airway.data, a.airway.data);
}

TEST(PhantomTree, RejectsBadSpecsWithDiagnostics) {
    PhantomSpec s;
    s.depth = 6;
    EXPECT_THROW(generate_tree_mask(s), std::invalid_argument);
    s = {};
    s.depth = 5;
    s.root_radius = 2.0;  // generation 5 would be under one voxel
    try {
        generate_tree_mask(s);
        FAIL();
    } catch (const std::invalid_argument& e) {
        EXPECT_NE(std::string(e.what()).find("generation 5"), std::string::npos) << e.what();
    }
    s = {};
    s.dims = {16, 16, 16};
    s.depth = 4;
    try {
        generate_tree_mask(s);
        FAIL();
    } catch (const std::invalid_argument& e) {
        EXPECT_NE(std::string(e.what()).find("16x16x16"), std::string::npos) << e.what();
    }
}

TEST(SynthesizeCt, FourIntensitiesWithoutNoise) {
    PhantomSpec s;
    s.depth = 2;
    s.seed = 4;
    const auto t = generate_tree_mask(s);
    const Image ct = synthesize_ct(t.airway, t.lung, 0.0, 1);
    std::set<float> values(ct.data.begin(), ct.data.end());
    EXPECT_EQ(values, (std::set<float>{-1000.0f, -850.0f, -200.0f, 40.0f}));
    const Mask wall = dilate26(t.airway);
    for (std::size_t i = 0; i < ct.size(); ++i) {
        if (t.airway[i]) ASSERT_EQ(ct[i], -1000.0f);
        else if (wall[i]) ASSERT_EQ(ct[i], -200.0f);
    }
}

TEST(SynthesizeCt, NoiseIsSeeded) {
    PhantomSpec s;
    s.depth = 2;
    const auto t = generate_tree_mask(s);
    const Image a = synthesize_ct(t.airway, t.lung, 20.0, 5), b = synthesize_ct(t.airway, t.lung, 20.0, 5);
    EXPECT_EQ(a.data, b.data);
    EXPECT_NE(a.data, synthesize_ct(t.airway, t.lung, 20.0, 6).data);
    EXPECT_THROW(synthesize_ct(t.airway, t.lung, -1.0, 5), std::invalid_argument);
}

TEST(Dataset, SplitSizes) {
    EXPECT_EQ(split_sizes(10), (std::array<std::size_t, 3>{6, 2, 2}));
    EXPECT_EQ(split_sizes(30), (std::array<std::size_t, 3>{18, 6, 6}));
    EXPECT_EQ(split_sizes(3), (std::array<std::size_t, 3>{1, 1, 1}));
    EXPECT_THROW(split_sizes(2), std::invalid_argument);
}

TEST(Dataset, DeterministicSplitAndCaseInvariants) {
    PhantomRanges r;
    r.dims = {48, 48, 48};
    r.lengths = {14.0, 9.0, 7.0, 5.0, 4.0};
    r.root_radius_min = 2.4;
    r.root_radius_max = 2.8;
    const auto a = make_dataset(10, r, 7);
    const auto b = make_dataset(10, r, 7);
    EXPECT_EQ(a.train.size(), 6u);
    EXPECT_EQ(a.val.size(), 2u);
    EXPECT_EQ(a.test.size(), 2u);
    EXPECT_EQ(a.train, b.train);
    EXPECT_EQ(a.val, b.val);
    EXPECT_EQ(a.test, b.test);
    std::set<std::size_t> all(a.train.begin(), a.train.end());
    all.insert(a.val.begin(), a.val.end());
    all.insert(a.test.begin(), a.test.end());
    EXPECT_EQ(all.size(), 10u);
    for (std::size_t i = 0; i < 10; ++i) {
        const auto& c = a.cases[i];
        EXPECT_EQ(c.id, phantom_case_id(i));
        EXPECT_EQ(c.ct.data, b.cases[i].ct.data);
        EXPECT_EQ(c.airway.data, b.cases[i].airway.data);
        EXPECT_GE(c.spec.depth, r.depth_min);
        EXPECT_LE(c.spec.depth, r.depth_max);
        EXPECT_EQ(c.branch_count, std::size_t((1 << c.spec.depth) - 1));
        EXPECT_GT(count_foreground(c.lung), 0);
        std::int64_t both = 0;
        for (std::size_t k = 0; k < c.lung.size(); ++k) both += c.lung[k] && c.airway[k];
        EXPECT_GT(both, 0);
    }
    EXPECT_NE(make_dataset(3, r, 8).cases[0].ct.data, a.cases[0].ct.data);
}
