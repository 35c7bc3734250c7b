#pragma once

// CT windowing, lung cropping, patch tiling with overlap averaging, and the
// two-stage inference workflow: stage 1 segments the whole airway, stage 2
// the airway inside the lung; the two are merged and reduced to the largest
// connected component.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "cotunet/components.hpp"
#include "cotunet/parallel.hpp"
#include "cotunet/tensor.hpp"
#include "cotunet/train.hpp"
#include "cotunet/unet.hpp"
#include "cotunet/volume.hpp"

namespace cotunet {

// ---- intensities ------------------------------------------------------------

struct HuWindow {
    double lo = -1000.0;
    double hi = 600.0;
};

/// Clamps HU to the window and maps it linearly onto [0, 1].
inline Image preprocess(const Image& hu, const HuWindow& w = {}) {
    Image out = hu.like<float>();
    const double span = w.hi - w.lo;
    for (std::size_t i = 0; i < hu.size(); ++i)
        out[i] = float((std::clamp(double(hu[i]), w.lo, w.hi) - w.lo) / span);
    return out;
}

/// Inverse of preprocess on [0, 1].
inline Image denormalize(const Image& v, const HuWindow& w = {}) {
    Image out = v.like<float>();
    for (std::size_t i = 0; i < v.size(); ++i) out[i] = float(double(v[i]) * (w.hi - w.lo) + w.lo);
    return out;
}

// ---- cropping -----------------------------------------------------------------

/// Axis-aligned box [lo, hi) in voxel indices.
struct CropBox {
    std::array<int, 3> lo{0, 0, 0};
    std::array<int, 3> hi{0, 0, 0};
    [[nodiscard]] Dims3 dims() const { return {hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]}; }
    bool operator==(const CropBox&) const = default;
};

/// Tight bounding box of the lung grown by `margin` voxels and clipped to the volume.
inline CropBox lung_crop_box(const Mask& lung, int margin) {
    if (margin < 0) throw std::invalid_argument("lung_crop_box: margin must be >= 0");
    const Dims3 d = lung.dims;
    CropBox b{{d.d, d.h, d.w}, {-1, -1, -1}};
    bool any = false;
    for (int z = 0; z < d.d; ++z)
        for (int y = 0; y < d.h; ++y)
            for (int x = 0; x < d.w; ++x) {
                if (!lung.at(z, y, x)) continue;
                any = true;
                const int c[3] = {z, y, x};
                for (int a = 0; a < 3; ++a) {
                    b.lo[std::size_t(a)] = std::min(b.lo[std::size_t(a)], c[a]);
                    b.hi[std::size_t(a)] = std::max(b.hi[std::size_t(a)], c[a] + 1);
                }
            }
    if (!any) throw std::invalid_argument("lung_crop_box: lung mask is empty");
    for (int a = 0; a < 3; ++a) {
        b.lo[std::size_t(a)] = std::max(0, b.lo[std::size_t(a)] - margin);
        b.hi[std::size_t(a)] = std::min(d[a], b.hi[std::size_t(a)] + margin);
    }
    return b;
}

template <typename T>
Volume<T> crop(const Volume<T>& v, const CropBox& b) {
    const Dims3 cd = b.dims();
    for (int a = 0; a < 3; ++a)
        if (b.lo[std::size_t(a)] < 0 || b.hi[std::size_t(a)] > v.dims[a] || cd[a] <= 0)
            throw std::invalid_argument("crop: box outside volume " + to_string(v.dims));
    Volume<T> out(cd, v.spacing);
    for (int z = 0; z < cd.d; ++z)
        for (int y = 0; y < cd.h; ++y)
            for (int x = 0; x < cd.w; ++x) out.at(z, y, x) = v.at(z + b.lo[0], y + b.lo[1], x + b.lo[2]);
    return out;
}

/// Places a cropped volume back into `full` dims; zero (or `fill`) elsewhere.
template <typename T>
Volume<T> uncrop(const Volume<T>& v, const CropBox& b, const Dims3& full, T fill = T(0)) {
    if (!(v.dims == b.dims())) throw std::invalid_argument("uncrop: volume dims differ from the crop box");
    Volume<T> out(full, v.spacing, fill);
    for (int z = 0; z < v.dims.d; ++z)
        for (int y = 0; y < v.dims.h; ++y)
            for (int x = 0; x < v.dims.w; ++x) out.at(z + b.lo[0], y + b.lo[1], x + b.lo[2]) = v.at(z, y, x);
    return out;
}

inline std::pair<Image, CropBox> crop_to_lung(const Image& ct, const Mask& lung, int margin) {
    require_same_dims(ct.dims, lung.dims, "crop_to_lung");
    const CropBox b = lung_crop_box(lung, margin);
    return {crop(ct, b), b};
}

/// Intrapulmonary airway: airway voxels inside the lung.
inline Mask make_stage2_labels(const Mask& airway, const Mask& lung) {
    require_same_dims(airway.dims, lung.dims, "make_stage2_labels");
    Mask out = airway.like<std::uint8_t>();
    for (std::size_t i = 0; i < airway.size(); ++i) out[i] = (airway[i] && lung[i]) ? 1 : 0;
    return out;
}

/// Training pair for one stage: stage 1 sees the whole normalized volume and
/// airway, stage 2 the lung box (as at inference) and the airway inside the lung.
inline TrainSample make_stage_sample(const Image& ct_hu, const Mask& airway, const Mask& lung, int stage,
                                     int crop_margin, const HuWindow& w = {}) {
    require_same_dims(ct_hu.dims, airway.dims, "make_stage_sample");
    require_same_dims(ct_hu.dims, lung.dims, "make_stage_sample");
    if (stage == 1) return {preprocess(ct_hu, w), airway};
    if (stage != 2) throw std::invalid_argument("make_stage_sample: stage must be 1 or 2, got " + std::to_string(stage));
    const CropBox b = lung_crop_box(lung, crop_margin);
    return {crop(preprocess(ct_hu, w), b), crop(make_stage2_labels(airway, lung), b)};
}

// ---- tiling -------------------------------------------------------------------

struct TilingPlan {
    Dims3 dims;    // volume
    Dims3 patch;
    std::array<int, 3> stride{};
    Dims3 padded;  // volume grown at the high end so that every axis holds a patch
    std::vector<std::array<int, 3>> origins;
};

/// Patches of `patch` voxels with the given fractional overlap; the last
/// patch on each axis is pinned to the far edge. Volumes smaller than a patch
/// are padded (edge replication) and cropped back after stitching.
inline TilingPlan plan_tiling(const Dims3& dims, const Dims3& patch, double overlap_fraction, int divisor = 1) {
    if (!(overlap_fraction >= 0.0 && overlap_fraction < 1.0))
        throw std::invalid_argument("plan_tiling: overlap must be in [0, 1)");
    if (dims.d < 1 || dims.h < 1 || dims.w < 1) throw std::invalid_argument("plan_tiling: empty volume");
    for (int a = 0; a < 3; ++a) {
        if (patch[a] < 1) throw std::invalid_argument("plan_tiling: patch must be positive");
        if (divisor > 1 && patch[a] % divisor != 0)
            throw std::invalid_argument("plan_tiling: patch " + to_string(patch) + " is not divisible by " +
                                        std::to_string(divisor));
    }
    TilingPlan p;
    p.dims = dims;
    p.patch = patch;
    p.padded = {std::max(dims.d, patch.d), std::max(dims.h, patch.h), std::max(dims.w, patch.w)};
    std::array<std::vector<int>, 3> starts;
    for (int a = 0; a < 3; ++a) {
        const int s = std::max(1, int(std::floor(double(patch[a]) * (1.0 - overlap_fraction))));
        p.stride[std::size_t(a)] = s;
        auto& v = starts[std::size_t(a)];
        const int last = p.padded[a] - patch[a];
        for (int o = 0; o < last; o += s) v.push_back(o);
        v.push_back(last);
    }
    for (int z : starts[0])
        for (int y : starts[1])
            for (int x : starts[2]) p.origins.push_back({z, y, x});
    return p;
}

/// One patch as a (1, 1, pd, ph, pw) tensor; coordinates past the volume
/// repeat the edge voxel.
inline Tensor5<float> extract_patch(const Image& v, const TilingPlan& plan, std::size_t k) {
    const auto& o = plan.origins.at(k);
    const Dims3 pd = plan.patch;
    Tensor5<float> t({1, 1, pd.d, pd.h, pd.w});
    for (int z = 0; z < pd.d; ++z)
        for (int y = 0; y < pd.h; ++y)
            for (int x = 0; x < pd.w; ++x)
                t(0, 0, z, y, x) = v.at(std::min(o[0] + z, v.dims.d - 1), std::min(o[1] + y, v.dims.h - 1),
                                        std::min(o[2] + x, v.dims.w - 1));
    return t;
}

/// Average of overlapping patch maps, accumulated in plan order.
inline Image stitch(const std::vector<Tensor5<float>>& patches, const TilingPlan& plan, const Spacing& spacing = {1, 1, 1}) {
    if (patches.size() != plan.origins.size())
        throw std::invalid_argument("stitch: " + std::to_string(patches.size()) + " patches for " +
                                    std::to_string(plan.origins.size()) + " origins");
    const Dims3 P = plan.padded, pd = plan.patch;
    std::vector<double> sum(std::size_t(P.count()), 0.0);
    std::vector<std::uint32_t> hits(std::size_t(P.count()), 0);
    for (std::size_t k = 0; k < patches.size(); ++k) {
        const auto& t = patches[k];
        if (!(t.shape() == Shape5{1, 1, pd.d, pd.h, pd.w}))
            throw std::invalid_argument("stitch: patch " + std::to_string(k) + " has shape " + to_string(t.shape()));
        const auto& o = plan.origins[k];
        for (int z = 0; z < pd.d; ++z)
            for (int y = 0; y < pd.h; ++y)
                for (int x = 0; x < pd.w; ++x) {
                    const auto i = std::size_t(P.index(o[0] + z, o[1] + y, o[2] + x));
                    sum[i] += double(t(0, 0, z, y, x));
                    ++hits[i];
                }
    }
    Image out(plan.dims, spacing);
    for (int z = 0; z < plan.dims.d; ++z)
        for (int y = 0; y < plan.dims.h; ++y)
            for (int x = 0; x < plan.dims.w; ++x) {
                const auto i = std::size_t(P.index(z, y, x));
                if (!hits[i]) throw std::logic_error("stitch: voxel not covered by any patch");
                out.at(z, y, x) = float(sum[i] / double(hits[i]));
            }
    return out;
}

/// Stitched foreground probabilities of a normalized image.
inline Image predict_volume(const Image& x, const UNetParams<float>& params, const UNetConfig& cfg, const Dims3& patch,
                            double overlap) {
    const auto plan = plan_tiling(x.dims, patch, overlap, cfg.required_divisor());
    std::vector<Tensor5<float>> out(plan.origins.size());
    parallel_for(std::int64_t(out.size()), [&](std::int64_t k) {
        out[std::size_t(k)] = predict_patch(extract_patch(x, plan, std::size_t(k)), params, cfg);
    });
    return stitch(out, plan, x.spacing);
}

inline Mask threshold(const Image& p, double t) {
    Mask m = p.like<std::uint8_t>();
    for (std::size_t i = 0; i < p.size(); ++i) m[i] = double(p[i]) >= t ? 1 : 0;
    return m;
}

// ---- two-stage inference ------------------------------------------------------

enum class MergeMode { Union, Intersection, Max };

inline MergeMode parse_merge_mode(const std::string& s) {
    if (s == "union") return MergeMode::Union;
    if (s == "intersection") return MergeMode::Intersection;
    if (s == "max") return MergeMode::Max;
    throw std::invalid_argument("unknown merge mode '" + s + "' (expected union, intersection or max)");
}

inline std::string to_string(MergeMode m) {
    switch (m) {
        case MergeMode::Union: return "union";
        case MergeMode::Intersection: return "intersection";
        case MergeMode::Max: return "max";
    }
    return "?";
}

struct StageModel {
    UNetConfig cfg;
    UNetParams<float> params;
};

struct TwoStageModel {
    StageModel stage1;  // whole airway
    StageModel stage2;  // airway inside the lung
};

struct InferOptions {
    double threshold = 0.5;
    Dims3 patch{32, 32, 32};
    double overlap = 0.5;
    int crop_margin = 4;
    MergeMode merge = MergeMode::Union;
    // stage 1 sees the whole volume so the trachea above the lung is kept;
    // false crops it to the lung box like stage 2
    bool stage1_full_volume = true;
    int connectivity = 26;
    HuWindow window{};
};

struct TwoStageResult {
    Mask final;
    Mask merged;
    Mask stage1;
    Mask stage2;
    Image prob1;
    Image prob2;  // zero outside the lung crop box
    std::string status = "ok";
};

/// Voxelwise merge of the two stage masks. Max thresholds the larger of the
/// two probabilities, with stage 2 counted only where its mask allows.
inline Mask merge_predictions(const Mask& s1, const Mask& s2, const Image& p1, const Image& p2, const Mask& lung,
                              MergeMode mode, double t) {
    require_same_dims(s1.dims, s2.dims, "merge_predictions");
    Mask out = s1.like<std::uint8_t>();
    for (std::size_t i = 0; i < s1.size(); ++i) {
        switch (mode) {
            case MergeMode::Union: out[i] = (s1[i] || s2[i]) ? 1 : 0; break;
            case MergeMode::Intersection: out[i] = (s1[i] && s2[i]) ? 1 : 0; break;
            case MergeMode::Max: {
                const double q2 = lung[i] ? double(p2[i]) : 0.0;
                out[i] = std::max(double(p1[i]), q2) >= t ? 1 : 0;
                break;
            }
        }
    }
    return out;
}

inline TwoStageResult two_stage_infer(const Image& ct_hu, const Mask& lung, const TwoStageModel& model,
                                      const InferOptions& opt = {}) {
    require_same_dims(ct_hu.dims, lung.dims, "two_stage_infer");
    const Image x = preprocess(ct_hu, opt.window);
    const CropBox box = lung_crop_box(lung, opt.crop_margin);
    const Image xc = crop(x, box);
    TwoStageResult r;

    if (opt.stage1_full_volume) {
        r.prob1 = predict_volume(x, model.stage1.params, model.stage1.cfg, opt.patch, opt.overlap);
    } else {
        r.prob1 = uncrop(predict_volume(xc, model.stage1.params, model.stage1.cfg, opt.patch, opt.overlap), box, x.dims);
    }
    r.prob2 = uncrop(predict_volume(xc, model.stage2.params, model.stage2.cfg, opt.patch, opt.overlap), box, x.dims);
    r.stage1 = threshold(r.prob1, opt.threshold);
    r.stage2 = threshold(r.prob2, opt.threshold);
    for (std::size_t i = 0; i < lung.size(); ++i)
        if (!lung[i]) r.stage2[i] = 0;
    r.merged = merge_predictions(r.stage1, r.stage2, r.prob1, r.prob2, lung, opt.merge, opt.threshold);
    r.final = largest_connected_component(r.merged, opt.connectivity);
    if (count_foreground(r.final) == 0) r.status = "warning: empty prediction";
    return r;
}

}  // namespace cotunet
