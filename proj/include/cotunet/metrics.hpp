#pragma once

// Airway evaluation: branch and tree-length detection on the reference
// centerline, voxel confusion rates, Dice, and label-free tree statistics.
// Percentages are in [0, 100]; an undefined ratio is NaN and named in
// MetricReport::status.

#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cotunet/skeleton.hpp"
#include "cotunet/volume.hpp"

namespace cotunet {

inline constexpr double kUndefined = std::numeric_limits<double>::quiet_NaN();

struct MetricOptions {
    // a branch counts as detected when at least this fraction of its
    // centerline voxels lie in the prediction; 0 means any single voxel
    double detect_fraction = 0.8;
    int smoothing_half_width = 2;
    SkeletonOptions skeleton{};
};

inline Mask mask_and(const Mask& a, const Mask& b) {
    require_same_dims(a.dims, b.dims, "mask_and");
    Mask out = a.like<std::uint8_t>();
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = (a[i] && b[i]) ? 1 : 0;
    return out;
}

inline Mask mask_or(const Mask& a, const Mask& b) {
    require_same_dims(a.dims, b.dims, "mask_or");
    Mask out = a.like<std::uint8_t>();
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = (a[i] || b[i]) ? 1 : 0;
    return out;
}

/// Centerline tree of the reference mask, restricted to `region` when given.
inline SkeletonTree reference_tree(const Mask& gt, const Mask* region = nullptr, const MetricOptions& opt = {}) {
    Mask sk = skeletonize(gt, opt.skeleton);
    if (region) sk = mask_and(sk, *region);
    return decompose_branches(sk, opt.smoothing_half_width, &gt, opt.skeleton.direction_window);
}

inline bool branch_is_detected(const Branch& b, const Mask& pred, double detect_fraction) {
    std::size_t hit = 0;
    for (std::int64_t v : b.voxels) hit += pred[std::size_t(v)] != 0;
    if (detect_fraction <= 0.0) return hit > 0;
    return double(hit) >= detect_fraction * double(b.voxels.size());
}

/// Percentage of reference branches detected by `pred`; NaN without branches.
inline double branches_detected(const SkeletonTree& gt, const Mask& pred, double detect_fraction = 0.8) {
    require_same_dims(gt.dims, pred.dims, "branches_detected");
    if (gt.branches.empty()) return kUndefined;
    std::size_t n = 0;
    for (const auto& b : gt.branches) n += branch_is_detected(b, pred, detect_fraction);
    return 100.0 * double(n) / double(gt.branches.size());
}

/// Percentage of reference centerline length whose steps have both ends in `pred`.
inline double tree_length_detected(const SkeletonTree& gt, const Mask& pred) {
    require_same_dims(gt.dims, pred.dims, "tree_length_detected");
    double inside = 0.0, total = 0.0;
    for (const auto& b : gt.branches)
        for (std::size_t i = 0; i < b.step_mm.size(); ++i) {
            total += b.step_mm[i];
            if (pred[std::size_t(b.path[i])] && pred[std::size_t(b.path[i + 1])]) inside += b.step_mm[i];
        }
    if (!(total > 0.0)) return kUndefined;
    return 100.0 * inside / total;
}

struct Confusion {
    std::int64_t tp = 0, fp = 0, tn = 0, fn = 0;
    double tpr = kUndefined, fpr = kUndefined, precision = kUndefined;
};

/// Voxel rates over `region` (whole volume when null).
inline Confusion confusion_metrics(const Mask& pred, const Mask& gt, const Mask* region = nullptr) {
    require_same_dims(pred.dims, gt.dims, "confusion_metrics");
    if (region) require_same_dims(region->dims, gt.dims, "confusion_metrics region");
    Confusion c;
    for (std::size_t i = 0; i < gt.size(); ++i) {
        if (region && !(*region)[i]) continue;
        const bool p = pred[i] != 0, g = gt[i] != 0;
        if (p && g) ++c.tp;
        else if (p) ++c.fp;
        else if (g) ++c.fn;
        else ++c.tn;
    }
    if (c.tp + c.fn > 0) c.tpr = 100.0 * double(c.tp) / double(c.tp + c.fn);
    if (c.fp + c.tn > 0) c.fpr = 100.0 * double(c.fp) / double(c.fp + c.tn);
    if (c.tp + c.fp > 0) c.precision = 100.0 * double(c.tp) / double(c.tp + c.fp);
    return c;
}

/// Dice over the full volume; two empty masks score 100.
inline double dsc(const Mask& pred, const Mask& gt) {
    require_same_dims(pred.dims, gt.dims, "dsc");
    std::int64_t inter = 0, p = 0, g = 0;
    for (std::size_t i = 0; i < gt.size(); ++i) {
        inter += (pred[i] && gt[i]) ? 1 : 0;
        p += pred[i] != 0;
        g += gt[i] != 0;
    }
    if (p + g == 0) return 100.0;
    return 100.0 * 2.0 * double(inter) / double(p + g);
}

struct AirwayStats {
    std::int64_t branch_count = 0;
    double tree_length_mm = 0.0;
    double airway_volume_mm3 = 0.0;
};

inline AirwayStats airway_stats(const Mask& m, const MetricOptions& opt = {}) {
    AirwayStats s;
    const std::int64_t n = count_foreground(m);
    s.airway_volume_mm3 = double(n) * m.voxel_volume();
    if (n == 0) return s;
    const auto tree =
        decompose_branches(skeletonize(m, opt.skeleton), opt.smoothing_half_width, &m, opt.skeleton.direction_window);
    s.branch_count = std::int64_t(tree.branch_count());
    s.tree_length_mm = tree.total_length_mm();
    return s;
}

struct MetricReport {
    std::string case_id;
    double bd = kUndefined, td = kUndefined, tpr = kUndefined, fpr = kUndefined, dsc = kUndefined,
           precision = kUndefined;
    std::int64_t branch_count = 0;
    double tree_length_mm = 0.0;
    double airway_volume_mm3 = 0.0;
    std::string status = "ok";
};

/// Full report for one case. BD, TD, TPR, FPR and precision are restricted to
/// `lung` when given; DSC always uses the whole volume. Tree statistics
/// describe the prediction.
inline MetricReport evaluate_case(const std::string& case_id, const Mask& pred, const Mask& gt, const Mask* lung,
                                  const MetricOptions& opt = {}) {
    require_same_dims(pred.dims, gt.dims, "evaluate_case");
    MetricReport r;
    r.case_id = case_id;
    const Mask p = lung ? mask_and(pred, *lung) : pred;
    const auto tree = reference_tree(gt, lung, opt);
    r.bd = branches_detected(tree, p, opt.detect_fraction);
    r.td = tree_length_detected(tree, p);
    const auto c = confusion_metrics(pred, gt, lung);
    r.tpr = c.tpr;
    r.fpr = c.fpr;
    r.precision = c.precision;
    r.dsc = dsc(pred, gt);
    const auto st = airway_stats(pred, opt);
    r.branch_count = st.branch_count;
    r.tree_length_mm = st.tree_length_mm;
    r.airway_volume_mm3 = st.airway_volume_mm3;
    std::vector<std::string> undefined;
    if (std::isnan(r.bd)) undefined.push_back("bd");
    if (std::isnan(r.td)) undefined.push_back("td");
    if (std::isnan(r.tpr)) undefined.push_back("tpr");
    if (std::isnan(r.fpr)) undefined.push_back("fpr");
    if (std::isnan(r.precision)) undefined.push_back("precision");
    if (!undefined.empty()) {
        r.status = "undefined:";
        for (std::size_t i = 0; i < undefined.size(); ++i) r.status += (i ? "," : "") + undefined[i];
    }
    return r;
}

// ---- report serialisation --------------------------------------------------

namespace detail {
inline nlohmann::json number_or_null(double v) { return std::isnan(v) ? nlohmann::json(nullptr) : nlohmann::json(v); }
inline std::string csv_number(double v) {
    if (std::isnan(v)) return "";
    std::ostringstream os;
    os.precision(10);
    os << v;
    return os.str();
}
}  // namespace detail

inline nlohmann::json to_json(const MetricReport& r) {
    using detail::number_or_null;
    return {{"case_id", r.case_id},
            {"bd", number_or_null(r.bd)},
            {"td", number_or_null(r.td)},
            {"tpr", number_or_null(r.tpr)},
            {"fpr", number_or_null(r.fpr)},
            {"dsc", number_or_null(r.dsc)},
            {"precision", number_or_null(r.precision)},
            {"branch_count", r.branch_count},
            {"tree_length_mm", r.tree_length_mm},
            {"airway_volume_mm3", r.airway_volume_mm3},
            {"status", r.status}};
}

inline std::string csv_header() {
    return "case_id,bd,td,tpr,fpr,dsc,precision,branch_count,tree_length_mm,airway_volume_mm3,status";
}

inline std::string csv_row(const MetricReport& r) {
    using detail::csv_number;
    std::ostringstream os;
    os << r.case_id << ',' << csv_number(r.bd) << ',' << csv_number(r.td) << ',' << csv_number(r.tpr) << ','
       << csv_number(r.fpr) << ',' << csv_number(r.dsc) << ',' << csv_number(r.precision) << ',' << r.branch_count
       << ',' << csv_number(r.tree_length_mm) << ',' << csv_number(r.airway_volume_mm3) << ',' << r.status;
    return os.str();
}

}  // namespace cotunet
