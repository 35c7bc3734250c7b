#pragma once

// The cotunet command line: phantom, train, infer, eval, stats, config.
//
// Dataset directory layout (written by `phantom`, read by the others):
//   manifest.json
//   <id>_ct.json / .raw      f32 HU
//   <id>_airway.json / .raw  u8 airway label
//   <id>_lung.json / .raw    u8 lung mask
// `infer` writes <id>_pred.json (final mask) plus the per-stage masks;
// `eval` pairs <id>_pred.json with <id>_airway.json and, when present,
// <id>_lung.json.

#include <algorithm>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "cotunet/config.hpp"
#include "cotunet/io.hpp"
#include "cotunet/metrics.hpp"
#include "cotunet/parallel.hpp"
#include "cotunet/phantom.hpp"
#include "cotunet/pipeline.hpp"
#include "cotunet/train.hpp"

namespace cotunet::cli {

struct CliError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// ---- dataset directory ----------------------------------------------------------

inline fs::path case_file(const fs::path& dir, const std::string& id, const std::string& what) {
    return dir / (id + "_" + what + ".json");
}

inline json manifest_json(const PhantomDataset& ds, const RunConfig& cfg) {
    std::map<std::size_t, std::string> split;
    for (auto i : ds.train) split[i] = "train";
    for (auto i : ds.val) split[i] = "val";
    for (auto i : ds.test) split[i] = "test";
    json cases = json::array();
    for (std::size_t i = 0; i < ds.cases.size(); ++i) {
        const auto& c = ds.cases[i];
        json branches = json::array();
        for (const auto& b : c.branches)
            branches.push_back({{"generation", b.generation},
                                {"parent", b.parent},
                                {"radius", b.radius},
                                {"length_mm", b.length_mm}});
        cases.push_back({{"id", c.id},
                         {"split", split.at(i)},
                         {"depth", c.spec.depth},
                         {"root_radius", c.spec.root_radius},
                         {"tree_seed", c.spec.seed},
                         {"noise_seed", c.noise_seed},
                         {"branch_count", c.branch_count},
                         {"centerline_length_mm", c.centerline_length_mm},
                         {"branches", branches}});
    }
    auto ids = [&](const std::vector<std::size_t>& v) {
        json a = json::array();
        for (auto i : v) a.push_back(ds.cases[i].id);
        return a;
    };
    return {{"format", "cotunet-phantoms"},
            {"seed", cfg.seed},
            {"config_hash", config_hash(cfg)},
            {"phantom", to_json(cfg.phantom)},
            {"cases", cases},
            {"splits", {{"train", ids(ds.train)}, {"val", ids(ds.val)}, {"test", ids(ds.test)}}}};
}

inline void write_dataset(const PhantomDataset& ds, const RunConfig& cfg, const fs::path& out) {
    fs::create_directories(out);
    for (const auto& c : ds.cases) {
        write_volume(c.ct, case_file(out, c.id, "ct"));
        write_volume(c.airway, case_file(out, c.id, "airway"));
        write_volume(c.lung, case_file(out, c.id, "lung"));
    }
    detail::write_text(out / "manifest.json", manifest_json(ds, cfg).dump(2) + "\n");
}

inline json read_manifest(const fs::path& dir) {
    const fs::path p = dir / "manifest.json";
    try {
        return json::parse(detail::read_file(p));
    } catch (const json::parse_error& e) {
        throw CliError(p.string() + ": bad JSON: " + e.what());
    }
}

inline std::vector<std::string> split_ids(const json& manifest, const std::string& split) {
    if (!manifest.contains("splits") || !manifest["splits"].contains(split))
        throw CliError("manifest has no split '" + split + "'");
    return manifest["splits"][split].get<std::vector<std::string>>();
}

struct LoadedCase {
    std::string id;
    Image ct;
    Mask airway;
    Mask lung;
};

inline LoadedCase load_case(const fs::path& dir, const std::string& id) {
    return {id, read_volume<float>(case_file(dir, id, "ct")), read_mask(case_file(dir, id, "airway")),
            read_mask(case_file(dir, id, "lung"))};
}

// ---- commands -------------------------------------------------------------------

inline void run_phantom(const RunConfig& cfg, const fs::path& out, std::ostream& log) {
    const auto ds = make_dataset(cfg.phantom.count, cfg.phantom.ranges, cfg.seed);
    write_dataset(ds, cfg, out);
    log << "phantom: wrote " << ds.cases.size() << " cases (" << ds.train.size() << " train, " << ds.val.size()
        << " val, " << ds.test.size() << " test) to " << out.string() << "\n";
}

inline std::vector<TrainSample> stage_samples(const fs::path& data, const std::vector<std::string>& ids, int stage,
                                              const RunConfig& cfg) {
    std::vector<TrainSample> out;
    for (const auto& id : ids) {
        const auto c = load_case(data, id);
        out.push_back(make_stage_sample(c.ct, c.airway, c.lung, stage, cfg.inference.crop_margin, cfg.inference.window));
    }
    return out;
}

inline json history_json(const TrainHistory& h) {
    json a = json::array();
    for (const auto& e : h.epochs)
        a.push_back({{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"val_loss", e.val_loss}, {"val_dsc", e.val_dsc}});
    return a;
}

inline Checkpoint train_stage(const RunConfig& cfg, const fs::path& data, int stage, std::ostream& log) {
    const json manifest = read_manifest(data);
    const auto tr = stage_samples(data, split_ids(manifest, "train"), stage, cfg);
    const auto va = stage_samples(data, split_ids(manifest, "val"), stage, cfg);
    TrainConfig tc = cfg.train;
    tc.seed = derive_seed(cfg.seed, std::uint64_t(stage));
    const auto res = train(tr, va, cfg.network, tc, [&](const EpochRecord& e) {
        log << "train stage " << stage << ": epoch " << e.epoch << " loss " << e.train_loss << " val_loss "
            << e.val_loss << " val_dsc " << e.val_dsc << "\n";
    });
    const auto& best = res.history.epochs.at(std::size_t(res.history.best_epoch - 1));
    Checkpoint ck;
    ck.config = cfg.network;
    ck.epoch = res.history.best_epoch;
    ck.params = res.params;
    ck.metrics = {{"stage", stage},
                  {"seed", cfg.seed},
                  {"config_hash", config_hash(cfg)},
                  {"best_val_loss", best.val_loss},
                  {"best_val_dsc", best.val_dsc},
                  {"stopped_early", res.history.stopped_early},
                  {"history", history_json(res.history)}};
    return ck;
}

struct InferredCase {
    std::string id;
    TwoStageResult result;
};

inline void write_inference(const InferredCase& c, const fs::path& out, bool probs) {
    write_volume(c.result.final, case_file(out, c.id, "pred"));
    write_volume(c.result.merged, case_file(out, c.id, "merged"));
    write_volume(c.result.stage1, case_file(out, c.id, "stage1"));
    write_volume(c.result.stage2, case_file(out, c.id, "stage2"));
    if (probs) {
        write_volume(c.result.prob1, case_file(out, c.id, "prob1"));
        write_volume(c.result.prob2, case_file(out, c.id, "prob2"));
    }
}

struct EvalSummary {
    std::vector<MetricReport> reports;
    json as_json;
    std::string csv;
};

inline EvalSummary evaluate_directory(const fs::path& pred_dir, const fs::path& gt_dir, bool use_lung,
                                      const RunConfig& cfg) {
    std::vector<std::string> ids;
    const std::string suffix = "_pred.json";
    if (!fs::is_directory(pred_dir)) throw CliError("eval: " + pred_dir.string() + " is not a directory");
    for (const auto& e : fs::directory_iterator(pred_dir)) {
        const std::string n = e.path().filename().string();
        if (n.size() > suffix.size() && n.compare(n.size() - suffix.size(), suffix.size(), suffix) == 0)
            ids.push_back(n.substr(0, n.size() - suffix.size()));
    }
    std::sort(ids.begin(), ids.end());
    if (ids.empty()) throw CliError("eval: no *_pred.json volumes in " + pred_dir.string());
    EvalSummary s;
    std::ostringstream csv;
    csv << csv_header() << "\n";
    json cases = json::array();
    double sums[6] = {};
    int counts[6] = {};
    for (const auto& id : ids) {
        const Mask pred = read_mask(case_file(pred_dir, id, "pred"));
        const Mask gt = read_mask(case_file(gt_dir, id, "airway"));
        std::optional<Mask> lung;
        if (use_lung && fs::exists(case_file(gt_dir, id, "lung"))) lung = read_mask(case_file(gt_dir, id, "lung"));
        const auto r = evaluate_case(id, pred, gt, lung ? &*lung : nullptr, cfg.metrics);
        s.reports.push_back(r);
        csv << csv_row(r) << "\n";
        cases.push_back(to_json(r));
        const double v[6] = {r.bd, r.td, r.tpr, r.fpr, r.dsc, r.precision};
        for (int k = 0; k < 6; ++k)
            if (!std::isnan(v[k])) {
                sums[k] += v[k];
                ++counts[k];
            }
    }
    const char* names[6] = {"bd", "td", "tpr", "fpr", "dsc", "precision"};
    json mean;
    for (int k = 0; k < 6; ++k) mean[names[k]] = counts[k] ? json(sums[k] / counts[k]) : json(nullptr);
    s.as_json = {{"config_hash", config_hash(cfg)}, {"cases", cases}, {"mean", mean}};
    s.csv = csv.str();
    return s;
}

inline std::vector<fs::path> mask_inputs(const fs::path& input, const std::string& suffix) {
    if (!fs::is_directory(input)) return {input};
    std::vector<fs::path> out;
    for (const auto& e : fs::directory_iterator(input)) {
        const std::string n = e.path().filename().string();
        if (n.size() >= suffix.size() && n.compare(n.size() - suffix.size(), suffix.size(), suffix) == 0)
            out.push_back(e.path());
    }
    std::sort(out.begin(), out.end());
    if (out.empty()) throw CliError("stats: no *" + suffix + " volumes in " + input.string());
    return out;
}

// ---- dispatch -------------------------------------------------------------------

/// Runs one command line. Returns the process exit status.
inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    CLI::App app{"Two-stage airway segmentation with a contextual-transformer U-Net", "cotunet"};
    app.failure_message(CLI::FailureMessage::help);
    app.require_subcommand(1);

    std::string config_path, out_dir;
    std::optional<std::uint64_t> seed;
    int threads = 0;
    auto common = [&](CLI::App* c) {
        c->add_option("--config", config_path, "Run configuration (JSON)")->check(CLI::ExistingFile);
        c->add_option("--seed", seed, "Seed; overrides the config");
        c->add_option("--out", out_dir, "Output directory");
        c->add_option("--threads", threads, "Worker threads (0 = default)")->check(CLI::NonNegativeNumber);
    };

    auto* phantom = app.add_subcommand("phantom", "Generate a synthetic phantom dataset");
    common(phantom);
    std::optional<std::size_t> n;
    phantom->add_option("--n", n, "Number of cases; overrides the config")->check(CLI::PositiveNumber);

    auto* trn = app.add_subcommand("train", "Train one stage on a phantom dataset");
    common(trn);
    std::string data;
    int stage = 1;
    trn->add_option("--data", data, "Dataset directory with manifest.json")->required()->check(CLI::ExistingDirectory);
    trn->add_option("--stage", stage, "1 = whole airway, 2 = intrapulmonary airway")->check(CLI::IsMember({1, 2}));

    auto* inf = app.add_subcommand("infer", "Two-stage inference");
    common(inf);
    std::string stage1_path, stage2_path, ct_path, lung_path, case_id, split = "test";
    bool save_probs = false;
    inf->add_option("--stage1", stage1_path, "Stage-1 checkpoint")->required()->check(CLI::ExistingFile);
    inf->add_option("--stage2", stage2_path, "Stage-2 checkpoint")->required()->check(CLI::ExistingFile);
    auto* inf_ct = inf->add_option("--ct", ct_path, "CT volume (f32 HU)")->check(CLI::ExistingFile);
    auto* inf_lung = inf->add_option("--lung", lung_path, "Lung mask (u8)")->check(CLI::ExistingFile);
    inf->add_option("--case", case_id, "Case id for output names (default: CT file stem without _ct)");
    auto* inf_data = inf->add_option("--data", data, "Dataset directory; infers every case of --split")
                         ->check(CLI::ExistingDirectory);
    inf->add_option("--split", split, "Split used with --data")->check(CLI::IsMember({"train", "val", "test"}));
    inf->add_flag("--save-probs", save_probs, "Also write the stitched probability maps");
    inf_ct->needs(inf_lung);
    inf_lung->needs(inf_ct);
    inf_data->excludes(inf_ct);

    auto* ev = app.add_subcommand("eval", "Metric report for predicted masks");
    common(ev);
    std::string pred_dir, gt_dir;
    bool no_lung = false;
    ev->add_option("--pred", pred_dir, "Directory of <id>_pred.json masks")->required()->check(CLI::ExistingDirectory);
    ev->add_option("--gt", gt_dir, "Directory of <id>_airway.json (and <id>_lung.json)")
        ->required()
        ->check(CLI::ExistingDirectory);
    ev->add_flag("--no-lung", no_lung, "Do not restrict BD/TD/TPR/FPR to the lung");

    auto* st = app.add_subcommand("stats", "Label-free tree statistics of binary masks");
    common(st);
    std::string input, suffix = "_pred.json";
    st->add_option("--input", input, "A u8 VOL1 header or a directory")->required()->check(CLI::ExistingPath);
    st->add_option("--suffix", suffix, "File name suffix selected in a directory");

    auto* cf = app.add_subcommand("config", "Print the effective configuration");
    common(cf);

    std::vector<const char*> args(argv, argv + argc);
    try {
        app.parse(int(args.size()), args.data());
    } catch (const CLI::ParseError& e) {
        return app.exit(e, out, err);
    }

    try {
        RunConfig cfg = config_path.empty() ? RunConfig{} : load_config(config_path);
        if (seed) cfg.seed = *seed;
        if (n) cfg.phantom.count = *n;
        if (threads > 0) set_num_threads(threads);
        auto need_out = [&](const char* cmd) {
            if (out_dir.empty()) throw CliError(std::string(cmd) + ": --out is required");
            return fs::path(out_dir);
        };

        if (*phantom) {
            if (cfg.phantom.count < 3) throw CliError("phantom: --n must be at least 3");
            run_phantom(cfg, need_out("phantom"), err);
        } else if (*trn) {
            const fs::path o = need_out("train");
            const auto ck = train_stage(cfg, data, stage, err);
            const fs::path p = o / ("stage" + std::to_string(stage) + ".ckpt");
            write_checkpoint(ck, p);
            detail::write_text(o / ("stage" + std::to_string(stage) + "_history.json"), ck.metrics.dump(2) + "\n");
            err << "train: best epoch " << ck.epoch << ", wrote " << p.string() << "\n";
        } else if (*inf) {
            const fs::path o = need_out("infer");
            const auto c1 = read_checkpoint(stage1_path), c2 = read_checkpoint(stage2_path);
            const TwoStageModel model{{c1.config, c1.params}, {c2.config, c2.params}};
            std::vector<std::string> ids;
            if (!data.empty()) {
                ids = split_ids(read_manifest(data), split);
            } else if (!ct_path.empty()) {
                ids.push_back(case_id);
            } else {
                throw CliError("infer: give --ct and --lung, or --data");
            }
            json summary = {{"config_hash", config_hash(cfg)}, {"cases", json::array()}};
            for (auto& id : ids) {
                Image ct;
                Mask lung;
                if (!data.empty()) {
                    ct = read_volume<float>(case_file(data, id, "ct"));
                    lung = read_mask(case_file(data, id, "lung"));
                } else {
                    ct = read_volume<float>(ct_path);
                    lung = read_mask(lung_path);
                    if (id.empty()) {
                        id = fs::path(ct_path).stem().string();
                        if (id.size() > 3 && id.compare(id.size() - 3, 3, "_ct") == 0) id.resize(id.size() - 3);
                    }
                }
                const InferredCase r{id, two_stage_infer(ct, lung, model, cfg.inference)};
                write_inference(r, o, save_probs);
                summary["cases"].push_back({{"id", id},
                                            {"status", r.result.status},
                                            {"voxels", count_foreground(r.result.final)},
                                            {"merged_voxels", count_foreground(r.result.merged)}});
                err << "infer: " << id << " " << r.result.status << "\n";
            }
            detail::write_text(o / "infer_summary.json", summary.dump(2) + "\n");
        } else if (*ev) {
            const fs::path o = need_out("eval");
            const auto s = evaluate_directory(pred_dir, gt_dir, !no_lung, cfg);
            detail::write_text(o / "report.csv", s.csv);
            detail::write_text(o / "report.json", s.as_json.dump(2) + "\n");
            out << s.csv;
        } else if (*st) {
            const fs::path o = need_out("stats");
            std::ostringstream csv;
            csv << "file,branch_count,tree_length_mm,airway_volume_mm3\n";
            json rows = json::array();
            for (const auto& p : mask_inputs(input, suffix)) {
                const auto a = airway_stats(read_mask(p), cfg.metrics);
                csv << p.filename().string() << ',' << a.branch_count << ',' << a.tree_length_mm << ','
                    << a.airway_volume_mm3 << "\n";
                rows.push_back({{"file", p.filename().string()},
                                {"branch_count", a.branch_count},
                                {"tree_length_mm", a.tree_length_mm},
                                {"airway_volume_mm3", a.airway_volume_mm3}});
            }
            detail::write_text(o / "stats.csv", csv.str());
            detail::write_text(o / "stats.json",
                               json{{"config_hash", config_hash(cfg)}, {"masks", rows}}.dump(2) + "\n");
            out << csv.str();
        } else if (*cf) {
            const std::string text = to_json(cfg).dump(2) + "\n";
            if (!out_dir.empty()) detail::write_text(fs::path(out_dir) / "config.json", text);
            out << text;
        }
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}

}  // namespace cotunet::cli
