#pragma once

// Synthetic airway trees: binary trees of tapering capsules, an ellipsoidal
// lung around the distal generations, and a pseudo-CT rendering.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "cotunet/components.hpp"
#include "cotunet/parallel.hpp"
#include "cotunet/random.hpp"
#include "cotunet/volume.hpp"

namespace cotunet {

struct PhantomSpec {
    Dims3 dims{64, 64, 64};
    Spacing spacing{1.0, 1.0, 1.0};
    int depth = 3;               // generations; the root is generation 1
    double root_radius = 3.0;    // voxels
    double radius_decay = 0.75;  // child radius = parent radius * decay
    double angle_min_deg = 25.0;  // child deviation from the parent axis
    double angle_max_deg = 45.0;
    std::vector<double> lengths{18.0, 12.0, 9.0, 7.0, 5.0};  // voxels, per generation
    double length_jitter = 0.15;  // each branch length scaled by U(1 - j, 1 + j)
    std::uint64_t seed = 0;

    [[nodiscard]] double radius(int generation) const { return root_radius * std::pow(radius_decay, generation - 1); }

    void validate() const {
        auto fail = [](const std::string& m) { throw std::invalid_argument("PhantomSpec: " + m); };
        if (depth < 1 || depth > 5) fail("depth must be in [1, 5], got " + std::to_string(depth));
        if (dims.d < 8 || dims.h < 8 || dims.w < 8) fail("dims must be at least 8 per axis, got " + to_string(dims));
        for (double s : spacing)
            if (!(s > 0)) fail("spacing must be positive");
        if (!(radius_decay > 0 && radius_decay <= 1)) fail("radius_decay must be in (0, 1]");
        if (radius(depth) < 1.0)
            fail("radius at generation " + std::to_string(depth) + " is " + std::to_string(radius(depth)) +
                 " voxels; must be >= 1");
        if (!(angle_min_deg > 0 && angle_min_deg <= angle_max_deg && angle_max_deg < 90))
            fail("branch angles must satisfy 0 < min <= max < 90");
        if (int(lengths.size()) < depth)
            fail("lengths lists " + std::to_string(lengths.size()) + " generations, depth is " + std::to_string(depth));
        for (int g = 0; g < depth; ++g)
            if (!(lengths[std::size_t(g)] > 0)) fail("lengths must be positive");
        if (!(length_jitter >= 0 && length_jitter < 1)) fail("length_jitter must be in [0, 1)");
    }
};

using Vec3 = std::array<double, 3>;  // (z, y, x) in voxel units

struct PhantomBranch {
    int generation = 1;
    int parent = -1;
    Vec3 start{}, end{};
    double radius = 0.0;
    double length_mm = 0.0;
};

struct PhantomTree {
    Mask airway;
    Mask lung;
    std::vector<PhantomBranch> branches;
    [[nodiscard]] std::size_t branch_count() const { return branches.size(); }
    [[nodiscard]] double centerline_length_mm() const {
        double s = 0.0;
        for (const auto& b : branches) s += b.length_mm;
        return s;
    }
};

namespace detail {

inline Vec3 add(Vec3 a, Vec3 b) { return {a[0] + b[0], a[1] + b[1], a[2] + b[2]}; }
inline Vec3 sub(Vec3 a, Vec3 b) { return {a[0] - b[0], a[1] - b[1], a[2] - b[2]}; }
inline Vec3 scale(Vec3 a, double s) { return {a[0] * s, a[1] * s, a[2] * s}; }
inline double dot(Vec3 a, Vec3 b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }
inline double norm(Vec3 a) { return std::sqrt(dot(a, a)); }
inline Vec3 cross(Vec3 a, Vec3 b) {
    return {a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]};
}
inline Vec3 normalized(Vec3 a) { return scale(a, 1.0 / norm(a)); }

inline double point_segment_distance(Vec3 p, Vec3 a, Vec3 b) {
    const Vec3 ab = sub(b, a);
    const double len2 = dot(ab, ab);
    const double t = len2 > 0 ? std::clamp(dot(sub(p, a), ab) / len2, 0.0, 1.0) : 0.0;
    return norm(sub(p, add(a, scale(ab, t))));
}

// Sampled at quarter-voxel steps; accurate enough for clearance checks.
inline double segment_distance(Vec3 a0, Vec3 a1, Vec3 b0, Vec3 b1) {
    const int n = std::max(2, int(std::ceil(norm(sub(a1, a0)) * 4)));
    double best = 1e300;
    for (int i = 0; i <= n; ++i) {
        const Vec3 p = add(a0, scale(sub(a1, a0), double(i) / n));
        best = std::min(best, point_segment_distance(p, b0, b1));
    }
    return best;
}

inline double length_mm(Vec3 a, Vec3 b, const Spacing& s) {
    const Vec3 d = sub(b, a);
    return std::sqrt(d[0] * d[0] * s[0] * s[0] + d[1] * d[1] * s[1] * s[1] + d[2] * d[2] * s[2] * s[2]);
}

inline bool inside_with_margin(Vec3 p, double margin, const Dims3& d) {
    for (int a = 0; a < 3; ++a)
        if (p[std::size_t(a)] < margin || p[std::size_t(a)] > d[a] - 1 - margin) return false;
    return true;
}

// Two children of `parent` on opposite sides of a random plane through its axis.
inline bool grow_children(const PhantomSpec& spec, std::vector<PhantomBranch>& tree, int parent, Rng& rng) {
    const PhantomBranch& p = tree[std::size_t(parent)];
    const int gen = p.generation + 1;
    const double r = spec.radius(gen);
    const Vec3 u = normalized(sub(p.end, p.start));
    const Vec3 helper = std::abs(u[0]) < 0.9 ? Vec3{1, 0, 0} : Vec3{0, 1, 0};
    const Vec3 e1 = normalized(cross(u, helper));
    const Vec3 e2 = cross(u, e1);
    std::uniform_real_distribution<double> phi_d(0.0, 2.0 * std::numbers::pi);
    std::uniform_real_distribution<double> theta_d(spec.angle_min_deg * std::numbers::pi / 180.0,
                                                   spec.angle_max_deg * std::numbers::pi / 180.0);
    std::uniform_real_distribution<double> jitter(1.0 - spec.length_jitter, 1.0 + spec.length_jitter);
    constexpr int kAttempts = 64;
    for (int attempt = 0; attempt < kAttempts; ++attempt) {
        const double phi = phi_d(rng);
        const Vec3 side = add(scale(e1, std::cos(phi)), scale(e2, std::sin(phi)));
        std::array<PhantomBranch, 2> kids;
        bool ok = true;
        for (int k = 0; k < 2; ++k) {
            const double theta = theta_d(rng);
            const double len = spec.lengths[std::size_t(gen - 1)] * jitter(rng);
            const Vec3 dir = add(scale(u, std::cos(theta)), scale(side, (k == 0 ? 1.0 : -1.0) * std::sin(theta)));
            auto& c = kids[std::size_t(k)];
            c.generation = gen;
            c.parent = parent;
            c.start = p.end;
            c.end = add(p.end, scale(dir, len));
            c.radius = r;
            c.length_mm = length_mm(c.start, c.end, spec.spacing);
            if (!inside_with_margin(c.end, r + 2.0, spec.dims)) ok = false;
        }
        if (!ok) continue;
        // clearance from every branch other than the parent
        for (std::size_t i = 0; i < tree.size() && ok; ++i) {
            if (int(i) == parent) continue;
            for (const auto& c : kids) {
                const double need = c.radius + tree[i].radius + 2.0;
                if (segment_distance(c.start, c.end, tree[i].start, tree[i].end) < need) {
                    ok = false;
                    break;
                }
            }
        }
        // siblings share a start point; keep their far ends apart
        if (ok && point_segment_distance(kids[0].end, kids[1].start, kids[1].end) < 2.0 * r + 2.0) ok = false;
        if (!ok) continue;
        tree.push_back(kids[0]);
        tree.push_back(kids[1]);
        return true;
    }
    return false;
}

inline void rasterize_capsule(Mask& m, const PhantomBranch& b, std::vector<int>* gen_of = nullptr) {
    int lo[3], hi[3];
    for (int a = 0; a < 3; ++a) {
        lo[a] = std::max(0, int(std::floor(std::min(b.start[std::size_t(a)], b.end[std::size_t(a)]) - b.radius)));
        hi[a] = std::min(m.dims[a] - 1, int(std::ceil(std::max(b.start[std::size_t(a)], b.end[std::size_t(a)]) + b.radius)));
    }
    for (int z = lo[0]; z <= hi[0]; ++z)
        for (int y = lo[1]; y <= hi[1]; ++y)
            for (int x = lo[2]; x <= hi[2]; ++x)
                if (point_segment_distance({double(z), double(y), double(x)}, b.start, b.end) <= b.radius) {
                    m.at(z, y, x) = 1;
                    if (gen_of) {
                        int& g = (*gen_of)[std::size_t(m.dims.index(z, y, x))];
                        g = g == 0 ? b.generation : std::min(g, b.generation);
                    }
                }
}

}  // namespace detail

/// Airway tree, lung mask and analytic branch list for one spec. The lung is
/// an axis-aligned ellipsoid containing every voxel of generation >= 2,
/// cut just above the first bifurcation so the trachea stays outside.
inline PhantomTree generate_tree_mask(const PhantomSpec& spec) {
    using namespace detail;
    spec.validate();
    const double r0 = spec.radius(1);
    Rng rng(spec.seed);
    std::uniform_real_distribution<double> jitter(1.0 - spec.length_jitter, 1.0 + spec.length_jitter);
    std::uniform_real_distribution<double> offset(-2.0, 2.0);
    std::uniform_real_distribution<double> tilt(-0.1, 0.1);

    std::vector<PhantomBranch> tree;
    Mask airway;
    std::vector<int> gen_of(std::size_t(spec.dims.count()), 0);
    constexpr int kTreeAttempts = 32;
    bool built = false;
    for (int attempt = 0; attempt < kTreeAttempts && !built; ++attempt) {
        tree.clear();
        PhantomBranch root;
        root.generation = 1;
        root.radius = r0;
        root.start = {r0 + 3.0, (spec.dims.h - 1) / 2.0 + offset(rng), (spec.dims.w - 1) / 2.0 + offset(rng)};
        const Vec3 dir = normalized({1.0, tilt(rng), tilt(rng)});
        root.end = add(root.start, scale(dir, spec.lengths[0] * jitter(rng)));
        root.length_mm = length_mm(root.start, root.end, spec.spacing);
        if (!inside_with_margin(root.start, r0 + 2.0, spec.dims) || !inside_with_margin(root.end, r0 + 2.0, spec.dims))
            continue;
        tree.push_back(root);
        built = true;
        for (std::size_t i = 0; i < tree.size() && built; ++i)
            if (tree[i].generation < spec.depth) built = grow_children(spec, tree, int(i), rng);
        if (built) {
            // thin siblings leaving at a narrow angle can fuse into a digital
            // tunnel; only solid, simply connected trees are kept
            airway = Mask(spec.dims, spec.spacing);
            std::fill(gen_of.begin(), gen_of.end(), 0);
            for (const auto& b : tree) rasterize_capsule(airway, b, &gen_of);
            built = count_components(airway) == 1 && euler_characteristic(airway) == 1;
        }
    }
    if (!built) {
        std::ostringstream os;
        os << "generate_tree_mask: could not fit a tunnel-free depth-" << spec.depth << " tree (root radius " << spec.root_radius
           << ", lengths";
        for (int g = 0; g < spec.depth; ++g) os << ' ' << spec.lengths[std::size_t(g)];
        os << ") inside " << to_string(spec.dims) << " after " << kTreeAttempts << " attempts (seed " << spec.seed
           << ")";
        throw std::invalid_argument(os.str());
    }

    PhantomTree out;
    out.airway = std::move(airway);
    out.branches = tree;

    // lung: fit voxels are generations >= 2, or the distal half of a lone root
    std::vector<Vec3> fit;
    for (std::int64_t i = 0; i < spec.dims.count(); ++i) {
        if (!gen_of[std::size_t(i)]) continue;
        const auto c = spec.dims.coords(i);
        const Vec3 p{double(c[0]), double(c[1]), double(c[2])};
        if (spec.depth >= 2 ? gen_of[std::size_t(i)] >= 2 : p[0] >= (tree[0].start[0] + tree[0].end[0]) / 2.0)
            fit.push_back(p);
    }
    Vec3 lo = fit.front(), hi = fit.front();
    for (const auto& p : fit)
        for (int a = 0; a < 3; ++a) {
            lo[std::size_t(a)] = std::min(lo[std::size_t(a)], p[std::size_t(a)]);
            hi[std::size_t(a)] = std::max(hi[std::size_t(a)], p[std::size_t(a)]);
        }
    Vec3 centre, axes;
    for (int a = 0; a < 3; ++a) {
        centre[std::size_t(a)] = (lo[std::size_t(a)] + hi[std::size_t(a)]) / 2.0;
        axes[std::size_t(a)] = (hi[std::size_t(a)] - lo[std::size_t(a)]) / 2.0 + 3.0;
    }
    auto level = [&](const Vec3& p) {
        double s = 0.0;
        for (int a = 0; a < 3; ++a) {
            const double t = (p[std::size_t(a)] - centre[std::size_t(a)]) / axes[std::size_t(a)];
            s += t * t;
        }
        return s;
    };
    double worst = 0.0;
    for (const auto& p : fit) worst = std::max(worst, level(p));
    if (worst > 1.0)
        for (auto& a : axes) a *= std::sqrt(worst) * 1.001;
    const double cut = lo[0] - 1.0;
    out.lung = Mask(spec.dims, spec.spacing);
    for (int z = 0; z < spec.dims.d; ++z)
        for (int y = 0; y < spec.dims.h; ++y)
            for (int x = 0; x < spec.dims.w; ++x) {
                const Vec3 p{double(z), double(y), double(x)};
                if (p[0] >= cut && level(p) <= 1.0) out.lung.at(z, y, x) = 1;
            }
    return out;
}

struct CtIntensities {
    double lumen = -1000.0;
    double wall = -200.0;
    double lung = -850.0;
    double tissue = 40.0;
};

/// 26-neighbourhood dilation by one voxel.
inline Mask dilate26(const Mask& m) {
    Mask out = m;
    const Dims3 d = m.dims;
    for (int z = 0; z < d.d; ++z)
        for (int y = 0; y < d.h; ++y)
            for (int x = 0; x < d.w; ++x) {
                if (!m.at(z, y, x)) continue;
                for (int dz = -1; dz <= 1; ++dz)
                    for (int dy = -1; dy <= 1; ++dy)
                        for (int dx = -1; dx <= 1; ++dx)
                            if (d.contains(z + dz, y + dy, x + dx)) out.at(z + dz, y + dy, x + dx) = 1;
            }
    return out;
}

/// Pseudo-HU volume: lumen, a one-voxel wall shell, lung parenchyma and soft
/// tissue, plus seeded Gaussian noise.
inline Image synthesize_ct(const Mask& airway, const Mask& lung, double noise_sigma, std::uint64_t seed,
                           const CtIntensities& hu = {}) {
    require_same_dims(airway.dims, lung.dims, "synthesize_ct");
    if (noise_sigma < 0) throw std::invalid_argument("synthesize_ct: noise_sigma must be >= 0");
    const Mask grown = dilate26(airway);
    Image ct(airway.dims, airway.spacing);
    Rng rng(seed);
    std::normal_distribution<double> noise(0.0, noise_sigma > 0 ? noise_sigma : 1.0);
    for (std::size_t i = 0; i < ct.size(); ++i) {
        double v = airway[i] ? hu.lumen : grown[i] ? hu.wall : lung[i] ? hu.lung : hu.tissue;
        if (noise_sigma > 0) v += noise(rng);
        ct[i] = float(v);
    }
    return ct;
}

// ---- datasets ----------------------------------------------------------------

struct PhantomRanges {
    Dims3 dims{64, 64, 64};
    Spacing spacing{1.0, 1.0, 1.0};
    int depth_min = 3, depth_max = 4;
    double root_radius_min = 2.6, root_radius_max = 3.4;
    double radius_decay = 0.75;
    double angle_min_deg = 25.0, angle_max_deg = 45.0;
    std::vector<double> lengths{18.0, 12.0, 9.0, 7.0, 5.0};
    double noise_sigma = 20.0;
};

struct PhantomCase {
    std::string id;
    PhantomSpec spec;
    Image ct;
    Mask airway;
    Mask lung;
    std::size_t branch_count = 0;
    double centerline_length_mm = 0.0;
    std::uint64_t noise_seed = 0;
    std::vector<PhantomBranch> branches;
};

struct PhantomDataset {
    std::vector<PhantomCase> cases;
    std::vector<std::size_t> train, val, test;  // indices into cases, ascending
};

inline std::string phantom_case_id(std::size_t i) {
    std::ostringstream os;
    os << "case_" << (i < 100 ? (i < 10 ? "00" : "0") : "") << i;
    return os.str();
}

/// Split sizes for n cases: 20% validation and 20% test (at least one each), rest train.
inline std::array<std::size_t, 3> split_sizes(std::size_t n) {
    if (n < 3) throw std::invalid_argument("make_dataset: need at least 3 cases, got " + std::to_string(n));
    const auto fifth = std::max<std::size_t>(1, std::size_t(std::llround(0.2 * double(n))));
    return {n - 2 * fifth, fifth, fifth};
}

inline PhantomCase make_case(std::size_t i, const PhantomRanges& r, std::uint64_t seed) {
    Rng rng(derive_seed(seed, i));
    PhantomCase c;
    c.id = phantom_case_id(i);
    c.spec.dims = r.dims;
    c.spec.spacing = r.spacing;
    c.spec.depth = std::uniform_int_distribution<int>(r.depth_min, r.depth_max)(rng);
    c.spec.root_radius = std::uniform_real_distribution<double>(r.root_radius_min, r.root_radius_max)(rng);
    c.spec.radius_decay = r.radius_decay;
    c.spec.angle_min_deg = r.angle_min_deg;
    c.spec.angle_max_deg = r.angle_max_deg;
    c.spec.lengths = r.lengths;
    c.spec.seed = derive_seed(seed, 1000 + i);
    c.noise_seed = derive_seed(seed, 2000 + i);
    auto tree = generate_tree_mask(c.spec);
    c.branch_count = tree.branch_count();
    c.centerline_length_mm = tree.centerline_length_mm();
    c.branches = tree.branches;
    c.ct = synthesize_ct(tree.airway, tree.lung, r.noise_sigma, c.noise_seed);
    c.airway = std::move(tree.airway);
    c.lung = std::move(tree.lung);
    return c;
}

/// n cases generated independently (in parallel) and split by a seeded shuffle.
inline PhantomDataset make_dataset(std::size_t n, const PhantomRanges& r, std::uint64_t seed) {
    const auto sizes = split_sizes(n);
    if (r.depth_min > r.depth_max || r.root_radius_min > r.root_radius_max)
        throw std::invalid_argument("make_dataset: empty parameter range");
    PhantomDataset ds;
    ds.cases.resize(n);
    parallel_for(std::int64_t(n), [&](std::int64_t i) { ds.cases[std::size_t(i)] = make_case(std::size_t(i), r, seed); });
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    Rng rng(derive_seed(seed, 0xD5));
    for (std::size_t i = n - 1; i > 0; --i)
        std::swap(order[i], order[std::uniform_int_distribution<std::size_t>(0, i)(rng)]);
    ds.train.assign(order.begin(), order.begin() + std::ptrdiff_t(sizes[0]));
    ds.val.assign(order.begin() + std::ptrdiff_t(sizes[0]), order.begin() + std::ptrdiff_t(sizes[0] + sizes[1]));
    ds.test.assign(order.begin() + std::ptrdiff_t(sizes[0] + sizes[1]), order.end());
    for (auto* v : {&ds.train, &ds.val, &ds.test}) std::sort(v->begin(), v->end());
    return ds;
}

}  // namespace cotunet
