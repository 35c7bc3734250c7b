#pragma once

// Patch-based training with Adam and early stopping on validation loss.
//
// An epoch draws `patches_per_case` patches from every training case in a
// seeded order; a patch is centred on a random foreground voxel with
// probability `foreground_fraction`, otherwise placed uniformly. Validation
// patches are drawn once and reused every epoch. The returned parameters are
// those of the epoch with the lowest validation loss (ties go to the higher
// validation DSC, then the earlier epoch).

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "cotunet/loss.hpp"
#include "cotunet/random.hpp"
#include "cotunet/tensor.hpp"
#include "cotunet/unet.hpp"
#include "cotunet/volume.hpp"

namespace cotunet {

struct AugmentOptions {
    bool flip = true;      // each axis flipped with probability 1/2
    double jitter = 0.05;  // additive uniform intensity noise amplitude
};

struct TrainConfig {
    int epochs = 50;
    double learning_rate = 0.003;
    int batch_size = 2;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    int early_stop_patience = 5;
    AugmentOptions augment{};
    Dims3 patch{32, 32, 32};
    int patches_per_case = 2;
    double foreground_fraction = 0.5;
    int val_patches_per_case = 2;
    LossOptions loss{};
    std::uint64_t seed = 0;

    void validate() const {
        auto fail = [](const std::string& m) { throw std::invalid_argument("TrainConfig: " + m); };
        if (epochs < 1) fail("epochs must be >= 1");
        if (!(learning_rate > 0)) fail("learning_rate must be positive");
        if (batch_size < 1) fail("batch_size must be >= 1");
        if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1)) fail("betas must be in [0, 1)");
        if (!(eps > 0)) fail("eps must be positive");
        if (early_stop_patience < 1) fail("early_stop_patience must be >= 1");
        if (!(augment.jitter >= 0)) fail("jitter must be >= 0");
        if (patch.d < 1 || patch.h < 1 || patch.w < 1) fail("patch must be positive");
        if (patches_per_case < 1 || val_patches_per_case < 1) fail("patches per case must be >= 1");
        if (!(foreground_fraction >= 0 && foreground_fraction <= 1)) fail("foreground_fraction must be in [0, 1]");
    }
};

/// A normalized image and its binary label.
struct TrainSample {
    Image image;
    Mask label;
};

struct EpochRecord {
    int epoch = 0;  // 1-based
    double train_loss = 0.0;
    double val_loss = 0.0;
    double val_dsc = 0.0;  // percent, over all validation patches
};

struct TrainHistory {
    std::vector<EpochRecord> epochs;
    int best_epoch = 0;
    bool stopped_early = false;
};

struct TrainResult {
    UNetParams<float> params;
    TrainHistory history;
};

namespace detail {

struct PatchPair {
    std::vector<float> image;
    std::vector<float> label;
};

// Patch at `origin`; voxels past the volume repeat the edge.
inline PatchPair cut_patch(const TrainSample& s, const std::array<int, 3>& origin, const Dims3& p) {
    const Dims3 d = s.image.dims;
    PatchPair out;
    out.image.resize(std::size_t(p.count()));
    out.label.resize(std::size_t(p.count()));
    std::size_t k = 0;
    for (int z = 0; z < p.d; ++z)
        for (int y = 0; y < p.h; ++y)
            for (int x = 0; x < p.w; ++x, ++k) {
                const int zz = std::min(origin[0] + z, d.d - 1), yy = std::min(origin[1] + y, d.h - 1),
                          xx = std::min(origin[2] + x, d.w - 1);
                out.image[k] = s.image.at(zz, yy, xx);
                out.label[k] = s.label.at(zz, yy, xx) ? 1.0f : 0.0f;
            }
    return out;
}

inline std::array<int, 3> draw_origin(const TrainSample& s, const std::vector<std::int64_t>& fg, const Dims3& p,
                                      double fg_fraction, Rng& rng) {
    const Dims3 d = s.image.dims;
    std::array<int, 3> o{};
    const bool centred = !fg.empty() && std::uniform_real_distribution<double>(0.0, 1.0)(rng) < fg_fraction;
    if (centred) {
        const auto c = d.coords(fg[std::uniform_int_distribution<std::size_t>(0, fg.size() - 1)(rng)]);
        for (int a = 0; a < 3; ++a)
            o[std::size_t(a)] = std::clamp(c[std::size_t(a)] - p[a] / 2, 0, std::max(0, d[a] - p[a]));
    } else {
        for (int a = 0; a < 3; ++a)
            o[std::size_t(a)] = std::uniform_int_distribution<int>(0, std::max(0, d[a] - p[a]))(rng);
    }
    return o;
}

inline void flip_axis(std::vector<float>& v, const Dims3& p, int axis) {
    std::vector<float> out(v.size());
    std::size_t k = 0;
    for (int z = 0; z < p.d; ++z)
        for (int y = 0; y < p.h; ++y)
            for (int x = 0; x < p.w; ++x, ++k) {
                const int zz = axis == 0 ? p.d - 1 - z : z, yy = axis == 1 ? p.h - 1 - y : y,
                          xx = axis == 2 ? p.w - 1 - x : x;
                out[std::size_t(p.index(zz, yy, xx))] = v[k];
            }
    v = std::move(out);
}

inline void augment(PatchPair& pp, const Dims3& p, const AugmentOptions& a, Rng& rng) {
    if (a.flip)
        for (int axis = 0; axis < 3; ++axis)
            if (std::bernoulli_distribution(0.5)(rng)) {
                flip_axis(pp.image, p, axis);
                flip_axis(pp.label, p, axis);
            }
    if (a.jitter > 0) {
        std::uniform_real_distribution<double> u(-a.jitter, a.jitter);
        for (auto& v : pp.image) v = float(double(v) + u(rng));
    }
}

// Main loss plus weighted auxiliary losses and their cotangents.
inline double network_loss(const UNetOutput<float>& out, std::span<const float> labels, const LossOptions& lo,
                           std::vector<float>* dmain, std::vector<Tensor5<float>>* daux) {
    auto main = total_loss(std::span<const float>(out.probs.storage()), labels, lo);
    double total = main.total;
    if (dmain) *dmain = std::move(main.gradient);
    for (std::size_t a = 0; a < out.aux_probs.size(); ++a) {
        const double w = aux_loss_weight(int(a) + 1);
        auto aux = total_loss(std::span<const float>(out.aux_probs[a].storage()), labels, lo);
        total += w * aux.total;
        if (daux) {
            for (auto& g : aux.gradient) g = float(double(g) * w);
            daux->emplace_back(out.aux_probs[a].shape(), std::move(aux.gradient));
        }
    }
    return total;
}

inline void check_samples(const std::vector<TrainSample>& v, const char* what) {
    if (v.empty()) throw std::invalid_argument(std::string("train: no ") + what + " samples");
    for (const auto& s : v) require_same_dims(s.image.dims, s.label.dims, "train sample");
}

}  // namespace detail

/// Tracks the best validation loss; lower loss wins, ties go to higher DSC.
struct EarlyStopping {
    int patience = 5;
    double best_loss = std::numeric_limits<double>::infinity();
    double best_dsc = -1.0;
    int since_best = 0;

    /// True when this epoch is the new best.
    bool update(double loss, double dsc) {
        if (loss < best_loss || (loss == best_loss && dsc > best_dsc)) {
            best_loss = loss;
            best_dsc = dsc;
            since_best = 0;
            return true;
        }
        ++since_best;
        return false;
    }
    [[nodiscard]] bool should_stop() const { return since_best >= patience; }
};

using EpochCallback = std::function<void(const EpochRecord&)>;

inline TrainResult train(const std::vector<TrainSample>& train_set, const std::vector<TrainSample>& val_set,
                         const UNetConfig& cfg, const TrainConfig& tc, const EpochCallback& on_epoch = {}) {
    using namespace detail;
    cfg.validate();
    tc.validate();
    check_samples(train_set, "training");
    check_samples(val_set, "validation");
    const Dims3 P = tc.patch;
    for (int a = 0; a < 3; ++a)
        if (P[a] % cfg.required_divisor() != 0)
            throw std::invalid_argument("train: patch " + to_string(P) + " is not divisible by " +
                                        std::to_string(cfg.required_divisor()));

    auto foreground = [](const std::vector<TrainSample>& set) {
        std::vector<std::vector<std::int64_t>> fg(set.size());
        for (std::size_t c = 0; c < set.size(); ++c)
            for (std::size_t i = 0; i < set[c].label.size(); ++i)
                if (set[c].label[i]) fg[c].push_back(std::int64_t(i));
        return fg;
    };
    const auto fg_train = foreground(train_set), fg_val = foreground(val_set);

    TrainResult res;
    res.params = unet_init<float>(cfg, derive_seed(tc.seed, 1));
    AdamState<float> adam;
    const AdamOptions ao{tc.learning_rate, tc.beta1, tc.beta2, tc.eps};

    // fixed validation patches
    std::vector<PatchPair> val_patches;
    {
        Rng rng(derive_seed(tc.seed, 2));
        for (std::size_t c = 0; c < val_set.size(); ++c)
            for (int k = 0; k < tc.val_patches_per_case; ++k)
                val_patches.push_back(
                    cut_patch(val_set[c], draw_origin(val_set[c], fg_val[c], P, tc.foreground_fraction, rng), P));
    }
    auto validate = [&](EpochRecord& rec) {
        double loss = 0.0, inter = 0.0, psum = 0.0, lsum = 0.0;
        for (const auto& vp : val_patches) {
            const Tensor5<float> x({1, 1, P.d, P.h, P.w}, vp.image);
            const auto out = detail::unet_run(x, res.params, cfg, false);
            loss += network_loss(out, vp.label, tc.loss, nullptr, nullptr);
            for (std::size_t i = 0; i < vp.label.size(); ++i) {
                const bool p = out.probs[i] >= 0.5f, l = vp.label[i] > 0.5f;
                inter += p && l;
                psum += p;
                lsum += l;
            }
        }
        rec.val_loss = loss / double(val_patches.size());
        rec.val_dsc = psum + lsum > 0 ? 100.0 * 2.0 * inter / (psum + lsum) : 100.0;
    };

    Rng rng(derive_seed(tc.seed, 3));
    UNetParams<float> best = res.params;
    EarlyStopping stop{tc.early_stop_patience};
    const std::size_t per = std::size_t(P.count());
    for (int epoch = 1; epoch <= tc.epochs; ++epoch) {
        // draw the epoch's patches in a shuffled case order
        std::vector<std::size_t> order;
        for (std::size_t c = 0; c < train_set.size(); ++c)
            for (int k = 0; k < tc.patches_per_case; ++k) order.push_back(c);
        std::shuffle(order.begin(), order.end(), rng);

        double loss_sum = 0.0;
        int steps = 0;
        for (std::size_t b0 = 0; b0 < order.size(); b0 += std::size_t(tc.batch_size)) {
            const std::size_t nb = std::min(order.size() - b0, std::size_t(tc.batch_size));
            std::vector<float> xs(nb * per), ls(nb * per);
            for (std::size_t j = 0; j < nb; ++j) {
                const std::size_t c = order[b0 + j];
                auto pp = cut_patch(train_set[c], draw_origin(train_set[c], fg_train[c], P, tc.foreground_fraction, rng), P);
                augment(pp, P, tc.augment, rng);
                std::copy(pp.image.begin(), pp.image.end(), xs.begin() + std::ptrdiff_t(j * per));
                std::copy(pp.label.begin(), pp.label.end(), ls.begin() + std::ptrdiff_t(j * per));
            }
            const Tensor5<float> x({int(nb), 1, P.d, P.h, P.w}, std::move(xs));
            const auto out = unet_forward(x, res.params, cfg);
            std::vector<float> dmain;
            std::vector<Tensor5<float>> daux;
            const double loss = network_loss(out, ls, tc.loss, &dmain, &daux);
            const bool finite_probs =
                std::all_of(out.probs.storage().begin(), out.probs.storage().end(), [](float v) { return std::isfinite(v); });
            if (!std::isfinite(loss) || !finite_probs) {
                std::ostringstream os;
                os << "train: non-finite " << (finite_probs ? "loss " : "probabilities, loss ") << loss << " at epoch " << epoch << ", step " << steps + 1
                   << " (learning rate " << tc.learning_rate << ")";
                throw std::runtime_error(os.str());
            }
            const auto g = unet_backward(Tensor5<float>(out.probs.shape(), std::move(dmain)), daux, out.trace,
                                         res.params, cfg);
            adam_step(res.params, g, adam, ao);
            loss_sum += loss;
            ++steps;
        }

        EpochRecord rec;
        rec.epoch = epoch;
        rec.train_loss = loss_sum / double(steps);
        validate(rec);
        if (!std::isfinite(rec.val_loss))
            throw std::runtime_error("train: non-finite validation loss at epoch " + std::to_string(epoch) +
                                     " (learning rate " + std::to_string(tc.learning_rate) + ")");
        res.history.epochs.push_back(rec);
        if (on_epoch) on_epoch(rec);

        if (stop.update(rec.val_loss, rec.val_dsc)) {
            best = res.params;
            res.history.best_epoch = epoch;
        } else if (stop.should_stop()) {
            res.history.stopped_early = epoch < tc.epochs;
            break;
        }
    }
    res.params = std::move(best);
    return res;
}

}  // namespace cotunet
