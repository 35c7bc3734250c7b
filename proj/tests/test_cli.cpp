#include <gtest/gtest.h>

#include <sstream>

#include "cli.hpp"

using namespace cotunet;

namespace {

struct Result {
    int status;
    std::string out, err;
};

Result run(std::vector<std::string> args) {
    args.insert(args.begin(), "cotunet");
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    std::ostringstream out, err;
    const int s = cli::run(int(argv.size()), argv.data(), out, err);
    return {s, out.str(), err.str()};
}

class Cli : public ::testing::Test {
protected:
    void SetUp() override {
        dir_ = fs::temp_directory_path() / ("cotunet_test_cli_" + std::to_string(::getpid()));
        fs::remove_all(dir_);
        fs::create_directories(dir_);
        detail::write_text(dir_ / "small.json", R"({
          "network": {"scales": 2, "base_channels": 2},
          "train": {"epochs": 1, "patch": [16, 16, 16], "patches_per_case": 1},
          "inference": {"patch": [16, 16, 16]},
          "phantom": {"count": 4, "dims": [24, 24, 24], "lengths": [8, 6, 4, 3, 3],
                      "root_radius_min": 2.0, "root_radius_max": 2.2, "depth_min": 2, "depth_max": 2}
        })");
    }
    void TearDown() override { fs::remove_all(dir_); }
    std::string p(const std::string& s) const { return (dir_ / s).string(); }
    fs::path dir_;
};

std::string slurp(const fs::path& f) { return detail::read_file(f); }

}  // namespace

TEST_F(Cli, UnknownSubcommandOrFlagPrintsUsage) {
    auto r = run({"frobnicate"});
    EXPECT_NE(r.status, 0);
    EXPECT_NE(r.err.find("Usage:"), std::string::npos) << r.err;
    r = run({"phantom", "--bogus", "1", "--out", p("x")});
    EXPECT_NE(r.status, 0);
    EXPECT_NE(r.err.find("Usage:"), std::string::npos) << r.err;
    r = run({});
    EXPECT_NE(r.status, 0);
    EXPECT_EQ(run({"--help"}).status, 0);
}

TEST_F(Cli, StrictConfigAbortsBeforeCompute) {
    detail::write_text(dir_ / "bad.json", R"({"train": {"epochz": 3}})");
    const auto r = run({"phantom", "--config", p("bad.json"), "--out", p("never")});
    EXPECT_EQ(r.status, 1);
    EXPECT_NE(r.err.find("unknown key 'epochz'"), std::string::npos) << r.err;
    EXPECT_FALSE(fs::exists(dir_ / "never"));
}

TEST_F(Cli, PhantomIsDeterministic) {
    ASSERT_EQ(run({"phantom", "--config", p("small.json"), "--n", "4", "--seed", "7", "--out", p("a")}).status, 0);
    ASSERT_EQ(run({"phantom", "--config", p("small.json"), "--n", "4", "--seed", "7", "--out", p("b")}).status, 0);
    std::size_t files = 0;
    for (const auto& e : fs::directory_iterator(dir_ / "a")) {
        ++files;
        EXPECT_EQ(slurp(e.path()), slurp(dir_ / "b" / e.path().filename())) << e.path();
    }
    EXPECT_EQ(files, 1u + 4u * 6u);
    const auto m = json::parse(slurp(dir_ / "a" / "manifest.json"));
    EXPECT_EQ(m["cases"].size(), 4u);
    EXPECT_EQ(m["cases"][0]["branch_count"], 3);
    EXPECT_EQ(m["cases"][0]["branches"].size(), 3u);
    ASSERT_EQ(run({"phantom", "--config", p("small.json"), "--seed", "8", "--out", p("c")}).status, 0);
    EXPECT_NE(slurp(dir_ / "a" / "case_000_ct.raw"), slurp(dir_ / "c" / "case_000_ct.raw"));
}

TEST_F(Cli, EvalOnIdenticalPairGivesPerfectScores) {
    ASSERT_EQ(run({"phantom", "--config", p("small.json"), "--out", p("d")}).status, 0);
    fs::create_directories(dir_ / "pred");
    write_volume(read_mask(dir_ / "d" / "case_002_airway.json"), dir_ / "pred" / "case_002_pred.json");
    const auto r = run({"eval", "--config", p("small.json"), "--pred", p("pred"), "--gt", p("d"), "--out", p("ev")});
    ASSERT_EQ(r.status, 0) << r.err;
    const auto csv = slurp(dir_ / "ev" / "report.csv");
    EXPECT_EQ(csv, r.out);
    EXPECT_EQ(csv.substr(0, csv.find('\n')), csv_header());
    EXPECT_NE(csv.find("case_002,100,100,100,0,100,100,"), std::string::npos) << csv;
    const auto j = json::parse(slurp(dir_ / "ev" / "report.json"));
    EXPECT_EQ(j["mean"]["dsc"], 100.0);
    EXPECT_EQ(j["config_hash"], config_hash(load_config(p("small.json"))));
}

TEST_F(Cli, TrainInferStatsRoundTrip) {
    ASSERT_EQ(run({"phantom", "--config", p("small.json"), "--out", p("d")}).status, 0);
    for (const char* o : {"m1", "m2"}) {
        for (const char* s : {"1", "2"}) {
            const auto r = run({"train", "--config", p("small.json"), "--data", p("d"), "--stage", s, "--out", p(o),
                                "--seed", "5"});
            ASSERT_EQ(r.status, 0) << r.err;
        }
    }
    EXPECT_EQ(slurp(dir_ / "m1" / "stage1.ckpt"), slurp(dir_ / "m2" / "stage1.ckpt"));
    EXPECT_EQ(slurp(dir_ / "m1" / "stage2.ckpt"), slurp(dir_ / "m2" / "stage2.ckpt"));
    EXPECT_NE(slurp(dir_ / "m1" / "stage1.ckpt"), slurp(dir_ / "m1" / "stage2.ckpt"));
    const auto ck = read_checkpoint(dir_ / "m1" / "stage2.ckpt");
    EXPECT_EQ(ck.metrics["stage"], 2);
    EXPECT_EQ(ck.metrics["history"].size(), 1u);

    auto r = run({"infer", "--config", p("small.json"), "--stage1", p("m1/stage1.ckpt"), "--stage2",
                  p("m1/stage2.ckpt"), "--data", p("d"), "--out", p("inf")});
    ASSERT_EQ(r.status, 0) << r.err;
    const auto summary = json::parse(slurp(dir_ / "inf" / "infer_summary.json"));
    ASSERT_EQ(summary["cases"].size(), 1u);  // the single test case
    const std::string id = summary["cases"][0]["id"];
    for (const char* w : {"pred", "merged", "stage1", "stage2"})
        EXPECT_TRUE(fs::exists(cli::case_file(dir_ / "inf", id, w))) << w;

    // single-case form names outputs after the CT file
    r = run({"infer", "--config", p("small.json"), "--stage1", p("m1/stage1.ckpt"), "--stage2", p("m1/stage2.ckpt"),
             "--ct", p("d/" + id + "_ct.json"), "--lung", p("d/" + id + "_lung.json"), "--out", p("one")});
    ASSERT_EQ(r.status, 0) << r.err;
    EXPECT_EQ(slurp(cli::case_file(dir_ / "one", id, "pred")), slurp(cli::case_file(dir_ / "inf", id, "pred")));
    EXPECT_EQ(slurp(dir_ / "one" / (id + "_pred.raw")), slurp(dir_ / "inf" / (id + "_pred.raw")));

    r = run({"eval", "--pred", p("inf"), "--gt", p("d"), "--out", p("ev")});
    EXPECT_EQ(r.status, 0) << r.err;

    r = run({"stats", "--input", p("d"), "--suffix", "_airway.json", "--out", p("st")});
    ASSERT_EQ(r.status, 0) << r.err;
    EXPECT_NE(r.out.find("case_003_airway.json,3,"), std::string::npos) << r.out;

    r = run({"infer", "--stage1", p("m1/stage1.ckpt"), "--stage2", p("m1/stage2.ckpt"), "--out", p("x")});
    EXPECT_EQ(r.status, 1);
    EXPECT_NE(r.err.find("--ct"), std::string::npos);
}

TEST_F(Cli, ConfigPrintsEffectiveValues) {
    const auto r = run({"config", "--config", p("small.json"), "--seed", "99"});
    ASSERT_EQ(r.status, 0);
    const auto j = json::parse(r.out);
    EXPECT_EQ(j["seed"], 99);
    EXPECT_EQ(j["network"]["scales"], 2);
    EXPECT_EQ(to_json(config_from_json(j)), j);
}
