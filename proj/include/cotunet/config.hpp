#pragma once

// Run configuration as JSON. Parsing is strict: unknown keys and wrongly
// typed values are rejected with the offending path, before any compute.
// Every field is optional and falls back to the RunConfig defaults.

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>

#include <nlohmann/json.hpp>

#include "cotunet/metrics.hpp"
#include "cotunet/phantom.hpp"
#include "cotunet/pipeline.hpp"
#include "cotunet/train.hpp"
#include "cotunet/unet.hpp"

namespace cotunet {

using json = nlohmann::json;

struct ConfigError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

struct PhantomConfig {
    std::size_t count = 30;
    PhantomRanges ranges{};
};

struct RunConfig {
    std::uint64_t seed = 0;
    UNetConfig network = default_network();
    TrainConfig train{};
    InferOptions inference{};
    MetricOptions metrics{};
    PhantomConfig phantom{};

    static UNetConfig default_network() {
        UNetConfig c;
        c.scales = 3;
        c.base_channels = 8;
        return c;
    }
};

namespace detail {

class StrictObject {
public:
    StrictObject(const json& j, std::string where) : j_(j), where_(std::move(where)) {
        if (!j_.is_object()) throw ConfigError(where_ + ": expected an object");
    }

    void integer(const char* key, int& out) {
        if (const json* v = take(key)) {
            if (!v->is_number_integer()) fail(key, "expected an integer");
            out = v->get<int>();
        }
    }
    void unsigned64(const char* key, std::uint64_t& out) {
        if (const json* v = take(key)) {
            if (!v->is_number_unsigned()) fail(key, "expected a non-negative integer");
            out = v->get<std::uint64_t>();
        }
    }
    void size(const char* key, std::size_t& out) {
        std::uint64_t v = out;
        unsigned64(key, v);
        out = std::size_t(v);
    }
    void number(const char* key, double& out) {
        if (const json* v = take(key)) {
            if (!v->is_number()) fail(key, "expected a number");
            out = v->get<double>();
        }
    }
    void boolean(const char* key, bool& out) {
        if (const json* v = take(key)) {
            if (!v->is_boolean()) fail(key, "expected true or false");
            out = v->get<bool>();
        }
    }
    void string(const char* key, std::string& out) {
        if (const json* v = take(key)) {
            if (!v->is_string()) fail(key, "expected a string");
            out = v->get<std::string>();
        }
    }
    void dims(const char* key, Dims3& out) {
        if (const json* v = take(key)) {
            if (!v->is_array() || v->size() != 3) fail(key, "expected [D, H, W]");
            for (const auto& e : *v)
                if (!e.is_number_integer()) fail(key, "expected integer entries");
            out = {(*v)[0].get<int>(), (*v)[1].get<int>(), (*v)[2].get<int>()};
        }
    }
    void numbers(const char* key, std::vector<double>& out, std::size_t exact = 0) {
        if (const json* v = take(key)) {
            if (!v->is_array() || (exact && v->size() != exact))
                fail(key, exact ? "expected an array of " + std::to_string(exact) + " numbers" : "expected an array");
            out.clear();
            for (const auto& e : *v) {
                if (!e.is_number()) fail(key, "expected numeric entries");
                out.push_back(e.get<double>());
            }
        }
    }
    void spacing(const char* key, Spacing& out) {
        std::vector<double> v(out.begin(), out.end());
        numbers(key, v, 3);
        std::copy(v.begin(), v.end(), out.begin());
    }
    template <typename F>
    void object(const char* key, F&& f) {
        if (const json* v = take(key)) {
            StrictObject sub(*v, where_ + "." + key);
            f(sub);
            sub.finish();
        }
    }

    void finish() const {
        for (const auto& [k, v] : j_.items())
            if (!used_.count(k)) throw ConfigError(where_ + ": unknown key '" + k + "'");
    }

private:
    const json* take(const char* key) {
        used_.insert(key);
        const auto it = j_.find(key);
        return it == j_.end() ? nullptr : &*it;
    }
    [[noreturn]] void fail(const char* key, const std::string& m) const {
        throw ConfigError(where_ + "." + key + ": " + m);
    }

    const json& j_;
    std::string where_;
    std::set<std::string> used_;
};

}  // namespace detail

// ---- to JSON ------------------------------------------------------------------

inline json dims_json(const Dims3& d) { return json::array({d.d, d.h, d.w}); }

inline json to_json(const UNetConfig& c) {
    return {{"scales", c.scales},
            {"base_channels", c.base_channels},
            {"cot_kernel", c.cot_kernel},
            {"deep_supervision", c.deep_supervision}};
}

inline json to_json(const TrainConfig& t) {
    return {{"epochs", t.epochs},
            {"learning_rate", t.learning_rate},
            {"batch_size", t.batch_size},
            {"beta1", t.beta1},
            {"beta2", t.beta2},
            {"eps", t.eps},
            {"early_stop_patience", t.early_stop_patience},
            {"flip", t.augment.flip},
            {"jitter", t.augment.jitter},
            {"patch", dims_json(t.patch)},
            {"patches_per_case", t.patches_per_case},
            {"foreground_fraction", t.foreground_fraction},
            {"val_patches_per_case", t.val_patches_per_case},
            {"loss",
             {{"smooth", t.loss.smooth}, {"alpha", t.loss.alpha}, {"gamma", t.loss.gamma}, {"clamp_eps", t.loss.clamp_eps}}}};
}

inline json to_json(const InferOptions& o) {
    return {{"threshold", o.threshold},
            {"patch", dims_json(o.patch)},
            {"overlap", o.overlap},
            {"crop_margin", o.crop_margin},
            {"merge", to_string(o.merge)},
            {"stage1_full_volume", o.stage1_full_volume},
            {"connectivity", o.connectivity},
            {"window", json::array({o.window.lo, o.window.hi})}};
}

inline json to_json(const MetricOptions& m) {
    return {{"detect_fraction", m.detect_fraction},
            {"smoothing_half_width", m.smoothing_half_width},
            {"skeleton",
             {{"trim_tolerance", m.skeleton.trim_tolerance},
              {"prune", m.skeleton.prune},
              {"prune_protrusion", m.skeleton.prune_protrusion},
              {"adjust_ends", m.skeleton.adjust_ends},
              {"direction_window", m.skeleton.direction_window}}}};
}

inline json to_json(const PhantomConfig& p) {
    const auto& r = p.ranges;
    return {{"count", p.count},
            {"dims", dims_json(r.dims)},
            {"spacing_mm", r.spacing},
            {"depth_min", r.depth_min},
            {"depth_max", r.depth_max},
            {"root_radius_min", r.root_radius_min},
            {"root_radius_max", r.root_radius_max},
            {"radius_decay", r.radius_decay},
            {"angle_min_deg", r.angle_min_deg},
            {"angle_max_deg", r.angle_max_deg},
            {"lengths", r.lengths},
            {"noise_sigma", r.noise_sigma}};
}

inline json to_json(const RunConfig& c) {
    return {{"seed", c.seed},
            {"network", to_json(c.network)},
            {"train", to_json(c.train)},
            {"inference", to_json(c.inference)},
            {"metrics", to_json(c.metrics)},
            {"phantom", to_json(c.phantom)}};
}

// ---- from JSON ----------------------------------------------------------------

inline void read_network(detail::StrictObject& o, UNetConfig& c) {
    o.integer("scales", c.scales);
    o.integer("base_channels", c.base_channels);
    o.integer("cot_kernel", c.cot_kernel);
    o.boolean("deep_supervision", c.deep_supervision);
}

inline UNetConfig network_from_json(const json& j, const std::string& where = "network") {
    UNetConfig c = RunConfig::default_network();
    detail::StrictObject o(j, where);
    read_network(o, c);
    o.finish();
    try {
        c.validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigError(where + ": " + e.what());
    }
    return c;
}

inline RunConfig config_from_json(const json& j) {
    RunConfig c;
    detail::StrictObject top(j, "config");
    top.unsigned64("seed", c.seed);
    top.object("network", [&](detail::StrictObject& o) { read_network(o, c.network); });
    top.object("train", [&](detail::StrictObject& o) {
        auto& t = c.train;
        o.integer("epochs", t.epochs);
        o.number("learning_rate", t.learning_rate);
        o.integer("batch_size", t.batch_size);
        o.number("beta1", t.beta1);
        o.number("beta2", t.beta2);
        o.number("eps", t.eps);
        o.integer("early_stop_patience", t.early_stop_patience);
        o.boolean("flip", t.augment.flip);
        o.number("jitter", t.augment.jitter);
        o.dims("patch", t.patch);
        o.integer("patches_per_case", t.patches_per_case);
        o.number("foreground_fraction", t.foreground_fraction);
        o.integer("val_patches_per_case", t.val_patches_per_case);
        o.object("loss", [&](detail::StrictObject& l) {
            l.number("smooth", t.loss.smooth);
            l.number("alpha", t.loss.alpha);
            l.number("gamma", t.loss.gamma);
            l.number("clamp_eps", t.loss.clamp_eps);
        });
    });
    top.object("inference", [&](detail::StrictObject& o) {
        auto& p = c.inference;
        o.number("threshold", p.threshold);
        o.dims("patch", p.patch);
        o.number("overlap", p.overlap);
        o.integer("crop_margin", p.crop_margin);
        std::string merge = to_string(p.merge);
        o.string("merge", merge);
        try {
            p.merge = parse_merge_mode(merge);
        } catch (const std::invalid_argument& e) {
            throw ConfigError(std::string("config.inference.merge: ") + e.what());
        }
        o.boolean("stage1_full_volume", p.stage1_full_volume);
        o.integer("connectivity", p.connectivity);
        std::vector<double> w{p.window.lo, p.window.hi};
        o.numbers("window", w, 2);
        p.window = {w[0], w[1]};
    });
    top.object("metrics", [&](detail::StrictObject& o) {
        auto& m = c.metrics;
        o.number("detect_fraction", m.detect_fraction);
        o.integer("smoothing_half_width", m.smoothing_half_width);
        o.object("skeleton", [&](detail::StrictObject& s) {
            s.number("trim_tolerance", m.skeleton.trim_tolerance);
            s.boolean("prune", m.skeleton.prune);
            s.number("prune_protrusion", m.skeleton.prune_protrusion);
            s.boolean("adjust_ends", m.skeleton.adjust_ends);
            s.integer("direction_window", m.skeleton.direction_window);
        });
    });
    top.object("phantom", [&](detail::StrictObject& o) {
        auto& r = c.phantom.ranges;
        o.size("count", c.phantom.count);
        o.dims("dims", r.dims);
        o.spacing("spacing_mm", r.spacing);
        o.integer("depth_min", r.depth_min);
        o.integer("depth_max", r.depth_max);
        o.number("root_radius_min", r.root_radius_min);
        o.number("root_radius_max", r.root_radius_max);
        o.number("radius_decay", r.radius_decay);
        o.number("angle_min_deg", r.angle_min_deg);
        o.number("angle_max_deg", r.angle_max_deg);
        o.numbers("lengths", r.lengths);
        o.number("noise_sigma", r.noise_sigma);
    });
    top.finish();

    // semantic checks, still before any compute
    auto check = [](const char* where, auto&& f) {
        try {
            f();
        } catch (const std::invalid_argument& e) {
            throw ConfigError(std::string(where) + ": " + e.what());
        }
    };
    check("config.network", [&] { c.network.validate(); });
    check("config.train", [&] { c.train.validate(); });
    const auto& inf = c.inference;
    if (!(inf.threshold >= 0 && inf.threshold <= 1)) throw ConfigError("config.inference.threshold: must be in [0, 1]");
    if (!(inf.overlap >= 0 && inf.overlap < 1)) throw ConfigError("config.inference.overlap: must be in [0, 1)");
    if (inf.crop_margin < 0) throw ConfigError("config.inference.crop_margin: must be >= 0");
    if (inf.connectivity != 6 && inf.connectivity != 18 && inf.connectivity != 26)
        throw ConfigError("config.inference.connectivity: must be 6, 18 or 26");
    if (!(inf.window.hi > inf.window.lo)) throw ConfigError("config.inference.window: hi must exceed lo");
    const int div = c.network.required_divisor();
    for (int a = 0; a < 3; ++a) {
        if (c.train.patch[a] % div) throw ConfigError("config.train.patch: not divisible by " + std::to_string(div));
        if (inf.patch[a] % div) throw ConfigError("config.inference.patch: not divisible by " + std::to_string(div));
    }
    if (!(c.metrics.detect_fraction >= 0 && c.metrics.detect_fraction <= 1))
        throw ConfigError("config.metrics.detect_fraction: must be in [0, 1]");
    if (c.metrics.smoothing_half_width < 0) throw ConfigError("config.metrics.smoothing_half_width: must be >= 0");
    const auto& r = c.phantom.ranges;
    if (c.phantom.count < 3) throw ConfigError("config.phantom.count: need at least 3 cases");
    if (r.depth_min > r.depth_max || r.root_radius_min > r.root_radius_max)
        throw ConfigError("config.phantom: empty parameter range");
    return c;
}

inline RunConfig parse_config(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        throw ConfigError(std::string("config: bad JSON: ") + e.what());
    }
    return config_from_json(j);
}

inline RunConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("config: cannot open " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    try {
        return parse_config(ss.str());
    } catch (const ConfigError& e) {
        throw ConfigError(path + ": " + e.what());
    }
}

// ---- hashing ------------------------------------------------------------------

inline std::uint64_t fnv1a64(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

/// Hash of the canonical (sorted-key, compact) JSON of the full config.
inline std::string config_hash(const RunConfig& c) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(to_json(c).dump())));
    return buf;
}

}  // namespace cotunet
