#pragma once

// Encoder-decoder network with contextual transformer blocks.
//
// Scale s has base_channels * 2^s channels. Encoder scale 0 is two plain
// 3x3x3 conv + instance norm + ReLU layers; every other encoder scale and
// every decoder scale is conv + norm + ReLU followed by CoT + norm + ReLU.
// Scales are joined by 2x2x2 max pooling on the way down and by trilinear x2
// upsampling + 3x3x3 conv on the way up; decoder inputs concatenate the
// encoder skip (first) with the upsampled path. A 1x1x1 head and a logistic
// give the foreground probability. With deep supervision every decoder scale
// below full resolution gets its own 1x1x1 head whose logits are upsampled to
// full resolution.

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "cotunet/cot3d.hpp"
#include "cotunet/ops.hpp"
#include "cotunet/random.hpp"

namespace cotunet {

struct UNetConfig {
    int scales = 5;
    int base_channels = 8;
    int cot_kernel = 3;
    bool deep_supervision = false;
    int in_channels = 1;
    int out_channels = 1;

    [[nodiscard]] int channels(int scale) const { return base_channels << scale; }
    [[nodiscard]] int required_divisor() const { return 1 << (scales - 1); }

    void validate() const {
        if (scales < 2) throw std::invalid_argument("UNetConfig: scales must be >= 2, got " + std::to_string(scales));
        if (scales > 8) throw std::invalid_argument("UNetConfig: scales must be <= 8");
        if (base_channels < 1) throw std::invalid_argument("UNetConfig: base_channels must be >= 1");
        if (cot_kernel <= 0 || cot_kernel % 2 == 0)
            throw std::invalid_argument("UNetConfig: cot_kernel must be odd and positive");
        if (in_channels != 1) throw std::invalid_argument("UNetConfig: in_channels must be 1");
        if (out_channels != 1) throw std::invalid_argument("UNetConfig: out_channels must be 1");
    }
};

template <typename T>
struct ConvNorm {
    ConvParams3D<T> conv;
    NormParams<T> norm;

    template <typename F>
    void for_each_tensor(F&& f) {
        f(std::span<T>(conv.weight));
        f(std::span<T>(conv.bias));
        f(std::span<T>(norm.gamma));
        f(std::span<T>(norm.beta));
    }
    [[nodiscard]] ConvNorm zeros_like() const { return {conv.zeros_like(), norm.zeros_like()}; }
};

template <typename T>
struct CotNorm {
    CoTParams<T> cot;
    NormParams<T> norm;

    template <typename F>
    void for_each_tensor(F&& f) {
        cot.for_each_tensor(f);
        f(std::span<T>(norm.gamma));
        f(std::span<T>(norm.beta));
    }
    [[nodiscard]] CotNorm zeros_like() const { return {cot.zeros_like(), norm.zeros_like()}; }
};

template <typename T>
struct UNetParams {
    std::vector<ConvNorm<T>> enc_conv;      // first layer of each scale
    ConvNorm<T> enc_first_second;           // second plain conv of scale 0
    std::vector<CotNorm<T>> enc_cot;        // scales 1 .. S-1 (index s-1)
    std::vector<ConvParams3D<T>> up_conv;   // decoder scale s, index s
    std::vector<ConvNorm<T>> dec_conv;      // decoder scale s, index s
    std::vector<CotNorm<T>> dec_cot;        // decoder scale s, index s
    ConvParams3D<T> head;
    std::vector<ConvParams3D<T>> aux_heads;  // decoder scales 1 .. S-2 (index s-1)

    /// Visits every parameter tensor in canonical (checkpoint) order:
    /// encoder shallow to deep, decoder deep to shallow, head, auxiliary heads.
    template <typename F>
    void for_each_tensor(F&& f) {
        const int S = int(enc_conv.size());
        auto conv = [&](ConvParams3D<T>& c) {
            f(std::span<T>(c.weight));
            f(std::span<T>(c.bias));
        };
        for (int s = 0; s < S; ++s) {
            enc_conv[std::size_t(s)].for_each_tensor(f);
            if (s == 0)
                enc_first_second.for_each_tensor(f);
            else
                enc_cot[std::size_t(s - 1)].for_each_tensor(f);
        }
        for (int s = S - 2; s >= 0; --s) {
            conv(up_conv[std::size_t(s)]);
            dec_conv[std::size_t(s)].for_each_tensor(f);
            dec_cot[std::size_t(s)].for_each_tensor(f);
        }
        conv(head);
        for (auto& a : aux_heads) conv(a);
    }
    template <typename F>
    void for_each_tensor(F&& f) const {
        const_cast<UNetParams*>(this)->for_each_tensor([&](std::span<T> s) { f(std::span<const T>(s)); });
    }

    [[nodiscard]] std::int64_t parameter_count() const {
        std::int64_t n = 0;
        for_each_tensor([&](std::span<const T> s) { n += std::int64_t(s.size()); });
        return n;
    }

    [[nodiscard]] std::vector<T> flatten() const {
        std::vector<T> out;
        out.reserve(std::size_t(parameter_count()));
        for_each_tensor([&](std::span<const T> s) { out.insert(out.end(), s.begin(), s.end()); });
        return out;
    }

    void unflatten(std::span<const T> flat) {
        if (std::int64_t(flat.size()) != parameter_count())
            throw std::invalid_argument("UNetParams::unflatten: expected " + std::to_string(parameter_count()) +
                                        " values, got " + std::to_string(flat.size()));
        std::size_t off = 0;
        for_each_tensor([&](std::span<T> s) {
            std::copy(flat.begin() + std::ptrdiff_t(off), flat.begin() + std::ptrdiff_t(off + s.size()), s.begin());
            off += s.size();
        });
    }

    [[nodiscard]] UNetParams zeros_like() const {
        UNetParams g = *this;
        g.for_each_tensor([](std::span<T> s) { std::fill(s.begin(), s.end(), T(0)); });
        return g;
    }

    template <typename U>
    [[nodiscard]] UNetParams<U> cast(const UNetConfig& cfg) const;
};

namespace detail {

// Seed streams per layer role; the main path never depends on whether the
// auxiliary heads exist.
enum : std::uint64_t {
    kStreamEncConv = 0,
    kStreamEncSecond = 100,
    kStreamEncCot = 200,
    kStreamUp = 300,
    kStreamDecConv = 400,
    kStreamDecCot = 500,
    kStreamHead = 600,
    kStreamAux = 700,
};

template <typename T>
ConvNorm<T> make_conv_norm(int out, int in, int k, std::uint64_t seed) {
    ConvNorm<T> b{ConvParams3D<T>::same(out, in, k), NormParams<T>::identity(out)};
    he_init(b.conv, seed);
    return b;
}

template <typename T>
CotNorm<T> make_cot_norm(int channels, int k, std::uint64_t seed) {
    return {cot_init<T>(channels, k, seed), NormParams<T>::identity(channels)};
}

template <typename T>
UNetParams<T> empty_params(const UNetConfig& cfg) {
    cfg.validate();
    UNetParams<T> p;
    const int S = cfg.scales;
    for (int s = 0; s < S; ++s) {
        const int in = s == 0 ? cfg.in_channels : cfg.channels(s - 1);
        p.enc_conv.push_back({ConvParams3D<T>::same(cfg.channels(s), in, 3), NormParams<T>::identity(cfg.channels(s))});
        if (s == 0)
            p.enc_first_second = {ConvParams3D<T>::same(cfg.channels(0), cfg.channels(0), 3),
                                  NormParams<T>::identity(cfg.channels(0))};
        else
            p.enc_cot.push_back({CoTParams<T>::zeros(cfg.channels(s), cfg.cot_kernel),
                                 NormParams<T>::identity(cfg.channels(s))});
    }
    for (int s = 0; s < S - 1; ++s) {
        const int c = cfg.channels(s);
        p.up_conv.push_back(ConvParams3D<T>::same(c, cfg.channels(s + 1), 3));
        p.dec_conv.push_back({ConvParams3D<T>::same(c, 2 * c, 3), NormParams<T>::identity(c)});
        p.dec_cot.push_back({CoTParams<T>::zeros(c, cfg.cot_kernel), NormParams<T>::identity(c)});
    }
    p.head = ConvParams3D<T>::same(cfg.out_channels, cfg.channels(0), 1);
    if (cfg.deep_supervision)
        for (int s = 1; s <= S - 2; ++s) p.aux_heads.push_back(ConvParams3D<T>::same(cfg.out_channels, cfg.channels(s), 1));
    return p;
}

}  // namespace detail

/// He-initialised weights, zero biases, unit/zero norm affine; deterministic per seed.
template <typename T>
UNetParams<T> unet_init(const UNetConfig& cfg, std::uint64_t seed) {
    UNetParams<T> p = detail::empty_params<T>(cfg);
    using namespace detail;
    const int S = cfg.scales;
    for (int s = 0; s < S; ++s) {
        he_init(p.enc_conv[std::size_t(s)].conv, derive_seed(seed, kStreamEncConv + s));
        if (s == 0)
            he_init(p.enc_first_second.conv, derive_seed(seed, kStreamEncSecond));
        else
            p.enc_cot[std::size_t(s - 1)].cot = cot_init<T>(cfg.channels(s), cfg.cot_kernel, derive_seed(seed, kStreamEncCot + s));
    }
    for (int s = 0; s < S - 1; ++s) {
        he_init(p.up_conv[std::size_t(s)], derive_seed(seed, kStreamUp + s));
        he_init(p.dec_conv[std::size_t(s)].conv, derive_seed(seed, kStreamDecConv + s));
        p.dec_cot[std::size_t(s)].cot = cot_init<T>(cfg.channels(s), cfg.cot_kernel, derive_seed(seed, kStreamDecCot + s));
    }
    he_init(p.head, derive_seed(seed, kStreamHead));
    for (std::size_t i = 0; i < p.aux_heads.size(); ++i) he_init(p.aux_heads[i], derive_seed(seed, kStreamAux + i));
    return p;
}

template <typename T>
template <typename U>
UNetParams<U> UNetParams<T>::cast(const UNetConfig& cfg) const {
    UNetParams<U> out = detail::empty_params<U>(cfg);
    const auto flat = flatten();
    std::vector<U> converted(flat.begin(), flat.end());
    out.unflatten(converted);
    return out;
}

// ---- layer blocks ---------------------------------------------------------

template <typename T>
struct ConvNormTrace {
    Tensor5<T> x;
    Tensor5<T> conv_out;
    NormCache norm;
    Tensor5<T> pre_act;
};

template <typename T>
struct CotNormTrace {
    CoTTrace<T> cot;
    Tensor5<T> block_out;
    NormCache norm;
    Tensor5<T> pre_act;
};

namespace detail {

template <typename T>
Tensor5<T> conv_norm_forward(const Tensor5<T>& x, const ConvNorm<T>& p, ConvNormTrace<T>* tr) {
    Tensor5<T> c = conv3d(x, p.conv);
    auto n = instance_norm3d(c, p.norm);
    Tensor5<T> y = relu(n.y);
    if (tr) {
        tr->x = x;
        tr->conv_out = std::move(c);
        tr->norm = std::move(n.cache);
        tr->pre_act = std::move(n.y);
    }
    return y;
}

template <typename T>
Tensor5<T> conv_norm_backward(const Tensor5<T>& dy, const ConvNormTrace<T>& tr, const ConvNorm<T>& p, ConvNorm<T>& g,
                              bool need_dx) {
    const Tensor5<T> dn = relu_grad(tr.pre_act, dy);
    auto ng = instance_norm3d_grad(tr.conv_out, tr.norm, p.norm, dn);
    g.norm = std::move(ng.dp);
    auto cg = conv3d_grad(tr.x, p.conv, ng.dx, need_dx);
    g.conv = std::move(cg.dp);
    return std::move(cg.dx);
}

template <typename T>
Tensor5<T> cot_norm_forward(const Tensor5<T>& x, const CotNorm<T>& p, CotNormTrace<T>* tr) {
    auto b = cot_forward(x, p.cot);
    auto n = instance_norm3d(b.y, p.norm);
    Tensor5<T> y = relu(n.y);
    if (tr) {
        tr->cot = std::move(b.trace);
        tr->block_out = std::move(b.y);
        tr->norm = std::move(n.cache);
        tr->pre_act = std::move(n.y);
    }
    return y;
}

template <typename T>
Tensor5<T> cot_norm_backward(const Tensor5<T>& dy, const CotNormTrace<T>& tr, const CotNorm<T>& p, CotNorm<T>& g) {
    const Tensor5<T> dn = relu_grad(tr.pre_act, dy);
    auto ng = instance_norm3d_grad(tr.block_out, tr.norm, p.norm, dn);
    g.norm = std::move(ng.dp);
    auto cg = cot_backward(ng.dx, tr.cot, p.cot);
    g.cot = std::move(cg.dp);
    return std::move(cg.dx);
}

}  // namespace detail

template <typename T>
struct UNetTrace {
    std::vector<ConvNormTrace<T>> enc_conv;
    ConvNormTrace<T> enc_first_second;
    std::vector<CotNormTrace<T>> enc_cot;
    std::vector<MaxPoolResult<T>> pools;  // pools[s-1] feeds encoder scale s
    std::vector<Shape5> up_source;        // decoder scale s: shape before upsampling
    std::vector<Tensor5<T>> up_x;         // decoder scale s: upsampled tensor (up_conv input)
    std::vector<ConvNormTrace<T>> dec_conv;
    std::vector<CotNormTrace<T>> dec_cot;
    Tensor5<T> head_in;
    Tensor5<T> probs;
    std::vector<Tensor5<T>> aux_in;
    std::vector<std::vector<Shape5>> aux_up_shapes;
    std::vector<Tensor5<T>> aux_probs;
};

template <typename T>
struct UNetOutput {
    Tensor5<T> probs;
    std::vector<Tensor5<T>> aux_probs;  // full resolution, decoder scales 1 .. S-2
    UNetTrace<T> trace;
};

inline void check_unet_input(const Shape5& xs, const UNetConfig& cfg) {
    cfg.validate();
    if (xs.c != cfg.in_channels)
        throw std::invalid_argument("unet_forward: input has " + std::to_string(xs.c) + " channels, expected " +
                                    std::to_string(cfg.in_channels));
    const int div = cfg.required_divisor();
    const int dims[3] = {xs.d, xs.h, xs.w};
    for (int a = 0; a < 3; ++a) {
        if (dims[a] <= 0 || dims[a] % div != 0) {
            const int padded = dims[a] <= 0 ? div : ((dims[a] + div - 1) / div) * div;
            throw std::invalid_argument(std::string("unet_forward: ") + detail::kAxisName[a] + " extent " +
                                        std::to_string(dims[a]) + " is not divisible by " + std::to_string(div) +
                                        "; pad by " + std::to_string(padded - dims[a]) + " to " +
                                        std::to_string(padded));
        }
    }
}

namespace detail {

template <typename T>
UNetOutput<T> unet_run(const Tensor5<T>& x, const UNetParams<T>& p, const UNetConfig& cfg, bool keep_trace) {
    check_unet_input(x.shape(), cfg);
    const int S = cfg.scales;
    UNetOutput<T> out;
    UNetTrace<T>& tr = out.trace;
    UNetTrace<T>* tp = keep_trace ? &tr : nullptr;
    if (keep_trace) {
        tr.enc_conv.resize(std::size_t(S));
        tr.enc_cot.resize(std::size_t(S - 1));
        tr.up_source.resize(std::size_t(S - 1));
        tr.up_x.resize(std::size_t(S - 1));
        tr.dec_conv.resize(std::size_t(S - 1));
        tr.dec_cot.resize(std::size_t(S - 1));
        tr.aux_in.resize(p.aux_heads.size());
        tr.aux_up_shapes.resize(p.aux_heads.size());
    }

    std::vector<Tensor5<T>> skips(std::size_t(S - 1));
    Tensor5<T> h = x;
    for (int s = 0; s < S; ++s) {
        if (s > 0) {
            auto pool = maxpool3d(h);
            h = pool.y;
            if (tp) tr.pools.push_back(std::move(pool));
        }
        h = conv_norm_forward(h, p.enc_conv[std::size_t(s)], tp ? &tr.enc_conv[std::size_t(s)] : nullptr);
        if (s == 0)
            h = conv_norm_forward(h, p.enc_first_second, tp ? &tr.enc_first_second : nullptr);
        else
            h = cot_norm_forward(h, p.enc_cot[std::size_t(s - 1)], tp ? &tr.enc_cot[std::size_t(s - 1)] : nullptr);
        if (s < S - 1) skips[std::size_t(s)] = h;
    }
    for (int s = S - 2; s >= 0; --s) {
        const Shape5 src = h.shape();
        Tensor5<T> u = upsample_trilinear(h);
        Tensor5<T> uc = conv3d(u, p.up_conv[std::size_t(s)]);
        if (tp) {
            tr.up_source[std::size_t(s)] = src;
            tr.up_x[std::size_t(s)] = std::move(u);
        }
        Tensor5<T> cat = concat_channels(skips[std::size_t(s)], uc);
        skips[std::size_t(s)] = Tensor5<T>();
        h = conv_norm_forward(cat, p.dec_conv[std::size_t(s)], tp ? &tr.dec_conv[std::size_t(s)] : nullptr);
        h = cot_norm_forward(h, p.dec_cot[std::size_t(s)], tp ? &tr.dec_cot[std::size_t(s)] : nullptr);
        if (s >= 1 && !p.aux_heads.empty()) {
            const std::size_t a = std::size_t(s - 1);
            Tensor5<T> logits = conv3d(h, p.aux_heads[a]);
            if (tp) tr.aux_in[a] = h;
            for (int k = 0; k < s; ++k) {
                if (tp) tr.aux_up_shapes[a].push_back(logits.shape());
                logits = upsample_trilinear(logits);
            }
            out.aux_probs.push_back(sigmoid(logits));
        }
    }
    // aux heads were produced deepest first; store shallow first
    std::reverse(out.aux_probs.begin(), out.aux_probs.end());
    out.probs = sigmoid(conv3d(h, p.head));
    if (tp) {
        tr.head_in = std::move(h);
        tr.probs = out.probs;
        tr.aux_probs = out.aux_probs;
    }
    return out;
}

}  // namespace detail

/// Forward pass retaining the activations needed by unet_backward.
template <typename T>
UNetOutput<T> unet_forward(const Tensor5<T>& x, const UNetParams<T>& p, const UNetConfig& cfg) {
    return detail::unet_run(x, p, cfg, true);
}

/// Forward pass without a trace; same values as unet_forward(...).probs.
template <typename T>
Tensor5<T> predict_patch(const Tensor5<T>& x, const UNetParams<T>& p, const UNetConfig& cfg) {
    return detail::unet_run(x, p, cfg, false).probs;
}

/// Reverse-mode gradients of a scalar loss given its cotangents with respect to
/// the main probabilities and (optionally, same order as aux_probs) each
/// auxiliary probability map. Empty auxiliary cotangents are treated as zero.
template <typename T>
UNetParams<T> unet_backward(const Tensor5<T>& dprobs, const std::vector<Tensor5<T>>& daux, const UNetTrace<T>& tr,
                            const UNetParams<T>& p, const UNetConfig& cfg) {
    using namespace detail;
    const int S = cfg.scales;
    if (tr.enc_conv.size() != std::size_t(S)) throw std::invalid_argument("unet_backward: trace missing");
    UNetParams<T> g = p.zeros_like();

    auto hg = conv3d_grad(tr.head_in, p.head, sigmoid_grad(tr.probs, dprobs));
    g.head = std::move(hg.dp);
    Tensor5<T> dh = std::move(hg.dx);

    std::vector<Tensor5<T>> dskip(std::size_t(S - 1));
    for (int s = 0; s <= S - 2; ++s) {
        if (s >= 1 && !p.aux_heads.empty()) {
            const std::size_t a = std::size_t(s - 1);
            if (a < daux.size() && daux[a].size() > 0) {
                Tensor5<T> dl = sigmoid_grad(tr.aux_probs[a], daux[a]);
                for (int k = int(tr.aux_up_shapes[a].size()) - 1; k >= 0; --k)
                    dl = upsample_trilinear_grad(dl, tr.aux_up_shapes[a][std::size_t(k)]);
                auto ag = conv3d_grad(tr.aux_in[a], p.aux_heads[a], dl);
                g.aux_heads[a] = std::move(ag.dp);
                accumulate(dh, ag.dx);
            }
        }
        dh = cot_norm_backward(dh, tr.dec_cot[std::size_t(s)], p.dec_cot[std::size_t(s)], g.dec_cot[std::size_t(s)]);
        dh = conv_norm_backward(dh, tr.dec_conv[std::size_t(s)], p.dec_conv[std::size_t(s)], g.dec_conv[std::size_t(s)],
                                true);
        auto [ds, du] = split_channels(dh, cfg.channels(s));
        dskip[std::size_t(s)] = std::move(ds);
        auto ug = conv3d_grad(tr.up_x[std::size_t(s)], p.up_conv[std::size_t(s)], du);
        g.up_conv[std::size_t(s)] = std::move(ug.dp);
        dh = upsample_trilinear_grad(ug.dx, tr.up_source[std::size_t(s)]);
    }
    for (int s = S - 1; s >= 0; --s) {
        if (s < S - 1) accumulate(dh, dskip[std::size_t(s)]);
        if (s == 0)
            dh = conv_norm_backward(dh, tr.enc_first_second, p.enc_first_second, g.enc_first_second, true);
        else
            dh = cot_norm_backward(dh, tr.enc_cot[std::size_t(s - 1)], p.enc_cot[std::size_t(s - 1)],
                                   g.enc_cot[std::size_t(s - 1)]);
        dh = conv_norm_backward(dh, tr.enc_conv[std::size_t(s)], p.enc_conv[std::size_t(s)], g.enc_conv[std::size_t(s)],
                                s > 0);
        if (s > 0) dh = maxpool3d_grad(dh, tr.pools[std::size_t(s - 1)]);
    }
    return g;
}

/// Loss weight of the auxiliary head at decoder scale s (>= 1).
inline double aux_loss_weight(int scale) { return std::ldexp(1.0, -scale); }

// ---- optimiser ------------------------------------------------------------

struct AdamOptions {
    double lr = 0.003;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

template <typename T>
struct AdamState {
    std::vector<double> m;
    std::vector<double> v;
    std::int64_t t = 0;
};

/// One bias-corrected Adam update, elementwise over the canonical parameter order.
template <typename T>
void adam_step(UNetParams<T>& params, const UNetParams<T>& grads, AdamState<T>& st, const AdamOptions& opt) {
    const std::int64_t n = params.parameter_count();
    if (grads.parameter_count() != n) throw std::invalid_argument("adam_step: gradient layout differs from params");
    if (st.m.empty()) {
        st.m.assign(std::size_t(n), 0.0);
        st.v.assign(std::size_t(n), 0.0);
    }
    if (std::int64_t(st.m.size()) != n || std::int64_t(st.v.size()) != n)
        throw std::invalid_argument("adam_step: optimiser state size differs from params");
    st.t += 1;
    const double c1 = 1.0 - std::pow(opt.beta1, double(st.t));
    const double c2 = 1.0 - std::pow(opt.beta2, double(st.t));
    const std::vector<T> gflat = grads.flatten();
    std::size_t off = 0;
    params.for_each_tensor([&](std::span<T> s) {
        for (std::size_t i = 0; i < s.size(); ++i, ++off) {
            const double g = double(gflat[off]);
            double& m = st.m[off];
            double& v = st.v[off];
            m = opt.beta1 * m + (1.0 - opt.beta1) * g;
            v = opt.beta2 * v + (1.0 - opt.beta2) * g * g;
            const double mhat = m / c1, vhat = v / c2;
            s[i] = T(double(s[i]) - opt.lr * mhat / (std::sqrt(vhat) + opt.eps));
        }
    });
}

}  // namespace cotunet
