#pragma once

// Centerline extraction and branch decomposition.
//
// Thinning deletes simple points (26/6 sense) in order of increasing distance
// to the background and keeps curve endpoints. Curve ends are then trimmed
// back to centres of maximal inscribed balls, short terminal spurs are
// pruned, and the two steps repeat until the skeleton stops changing. Free
// ends are finally moved to where the tube's medial axis should stop.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <numeric>
#include <optional>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "cotunet/components.hpp"
#include "cotunet/volume.hpp"

namespace cotunet {

struct SkeletonOptions {
    // slack (voxels) in the inscribed-ball containment test used to trim curve ends
    double trim_tolerance = 0.5;
    bool prune = true;
    // a terminal branch is a spur when the mask beyond its end reaches at
    // most this many voxels past every other skeleton voxel's inscribed ball
    double prune_protrusion = 2.0;
    // move free curve ends to the estimated medial-axis end point
    bool adjust_ends = true;
    int direction_window = 4;  // voxels used to estimate an end's direction
};

namespace detail {

constexpr int kCubeCentre = 13;

inline constexpr int cube_pos(int dz, int dy, int dx) { return (dz + 1) * 9 + (dy + 1) * 3 + (dx + 1); }

struct CubeTables {
    std::array<std::vector<int>, 27> adj26;    // 26-adjacency inside the cube, centre excluded
    std::array<std::vector<int>, 27> adj6n18;  // 6-adjacency restricted to N18, centre excluded
    std::array<int, 6> faces{};
};

inline const CubeTables& cube_tables() {
    static const CubeTables t = [] {
        CubeTables c;
        auto l1 = [](int p) {
            return std::abs(p / 9 - 1) + std::abs((p / 3) % 3 - 1) + std::abs(p % 3 - 1);
        };
        int f = 0;
        for (int p = 0; p < 27; ++p) {
            if (p == kCubeCentre) continue;
            if (l1(p) == 1) c.faces[std::size_t(f++)] = p;
            for (int q = 0; q < 27; ++q) {
                if (q == p || q == kCubeCentre) continue;
                const int dz = std::abs(p / 9 - q / 9), dy = std::abs((p / 3) % 3 - (q / 3) % 3),
                          dx = std::abs(p % 3 - q % 3);
                if (std::max({dz, dy, dx}) == 1) c.adj26[std::size_t(p)].push_back(q);
                if (dz + dy + dx == 1 && l1(p) <= 2 && l1(q) <= 2) c.adj6n18[std::size_t(p)].push_back(q);
            }
        }
        return c;
    }();
    return t;
}

/// Simple point test: one 26-component of foreground in N26*, and one
/// 6-component of background in N18 that touches a face neighbour.
inline bool is_simple_point(const std::array<std::uint8_t, 27>& nb) {
    const auto& t = cube_tables();
    std::uint32_t seen = 0;
    int stack[27];
    int comps = 0;
    for (int p = 0; p < 27; ++p) {
        if (p == kCubeCentre || !nb[std::size_t(p)] || (seen >> p & 1u)) continue;
        if (++comps > 1) return false;
        int top = 0;
        stack[top++] = p;
        seen |= 1u << p;
        while (top) {
            const int v = stack[--top];
            for (int q : t.adj26[std::size_t(v)])
                if (nb[std::size_t(q)] && !(seen >> q & 1u)) {
                    seen |= 1u << q;
                    stack[top++] = q;
                }
        }
    }
    if (comps != 1) return false;
    seen = 0;
    comps = 0;
    for (int p : t.faces) {
        if (nb[std::size_t(p)] || (seen >> p & 1u)) continue;
        if (++comps > 1) return false;
        int top = 0;
        stack[top++] = p;
        seen |= 1u << p;
        while (top) {
            const int v = stack[--top];
            for (int q : t.adj6n18[std::size_t(v)])
                if (!nb[std::size_t(q)] && !(seen >> q & 1u)) {
                    seen |= 1u << q;
                    stack[top++] = q;
                }
        }
    }
    return comps == 1;
}

/// Binary grid with a one-voxel zero border so neighbourhood reads need no bounds checks.
struct PaddedGrid {
    Dims3 inner;
    int ph = 0, pw = 0;
    std::vector<std::uint8_t> v;
    std::array<std::int64_t, 27> off{};

    explicit PaddedGrid(const Mask& m) : inner(m.dims), ph(m.dims.h + 2), pw(m.dims.w + 2) {
        v.assign(std::size_t(std::int64_t(m.dims.d + 2) * ph * pw), 0);
        for (int z = 0; z < inner.d; ++z)
            for (int y = 0; y < inner.h; ++y)
                for (int x = 0; x < inner.w; ++x) v[std::size_t(pad(z, y, x))] = m.at(z, y, x) ? 1 : 0;
        for (int dz = -1; dz <= 1; ++dz)
            for (int dy = -1; dy <= 1; ++dy)
                for (int dx = -1; dx <= 1; ++dx)
                    off[std::size_t(cube_pos(dz, dy, dx))] = (std::int64_t(dz) * ph + dy) * pw + dx;
    }
    [[nodiscard]] std::int64_t pad(int z, int y, int x) const { return (std::int64_t(z + 1) * ph + (y + 1)) * pw + (x + 1); }
    [[nodiscard]] std::array<std::uint8_t, 27> neighborhood(std::int64_t i) const {
        std::array<std::uint8_t, 27> nb{};
        for (int p = 0; p < 27; ++p) nb[std::size_t(p)] = v[std::size_t(i + off[std::size_t(p)])];
        return nb;
    }
    // parity class (z%2, y%2, x%2) of a padded index; no two voxels of a class are adjacent
    [[nodiscard]] int parity(std::int64_t i) const {
        const std::int64_t x = i % pw, y = (i / pw) % ph, z = i / (std::int64_t(pw) * ph);
        return int((z & 1) * 4 + (y & 1) * 2 + (x & 1));
    }
    [[nodiscard]] int degree(std::int64_t i) const {
        int n = 0;
        for (int p = 0; p < 27; ++p)
            if (p != kCubeCentre) n += v[std::size_t(i + off[std::size_t(p)])];
        return n;
    }
    [[nodiscard]] std::vector<std::int64_t> foreground() const {
        std::vector<std::int64_t> out;
        for (std::size_t i = 0; i < v.size(); ++i)
            if (v[i]) out.push_back(std::int64_t(i));
        return out;
    }
    [[nodiscard]] Mask unpad(Spacing s) const {
        Mask m(inner, s);
        for (int z = 0; z < inner.d; ++z)
            for (int y = 0; y < inner.h; ++y)
                for (int x = 0; x < inner.w; ++x) m.at(z, y, x) = v[std::size_t(pad(z, y, x))];
        return m;
    }
};

/// Squared Euclidean distance (voxel units) from every voxel to the nearest
/// background voxel, outside the volume counting as background. Separable
/// lower-envelope transform, exact on the integer grid.
inline std::vector<double> squared_edt(const Mask& m) {
    const Dims3 d = m.dims;
    constexpr double kInf = 1e30;
    std::vector<double> f(m.size());
    for (std::size_t i = 0; i < m.size(); ++i) f[i] = m[i] ? kInf : 0.0;
    std::vector<double> line, out;
    std::vector<int> v;
    std::vector<double> z;
    // one pass per axis over lines extended by a background voxel at each end
    auto pass = [&](int n, auto&& at) {
        line.assign(std::size_t(n) + 2, 0.0);
        for (int i = 0; i < n; ++i) line[std::size_t(i) + 1] = at(i);
        const int m2 = n + 2;
        v.assign(std::size_t(m2), 0);
        z.assign(std::size_t(m2) + 1, 0.0);
        int k = -1;
        for (int q = 0; q < m2; ++q) {
            if (line[std::size_t(q)] >= kInf) continue;
            const double fq = line[std::size_t(q)] + double(q) * q;
            double s = -kInf;
            while (k >= 0) {
                const int p = v[std::size_t(k)];
                s = (fq - (line[std::size_t(p)] + double(p) * p)) / (2.0 * (q - p));
                if (s > z[std::size_t(k)]) break;
                --k;
            }
            ++k;
            v[std::size_t(k)] = q;
            z[std::size_t(k)] = k == 0 ? -kInf : s;
            z[std::size_t(k) + 1] = kInf;
        }
        out.assign(std::size_t(n), 0.0);
        int j = 0;
        for (int q = 1; q <= n; ++q) {
            while (z[std::size_t(j) + 1] < q) ++j;
            const int p = v[std::size_t(j)];
            out[std::size_t(q - 1)] = double(q - p) * (q - p) + line[std::size_t(p)];
        }
    };
    for (int y = 0; y < d.h; ++y)
        for (int x = 0; x < d.w; ++x) {
            pass(d.d, [&](int i) { return f[std::size_t(d.index(i, y, x))]; });
            for (int i = 0; i < d.d; ++i) f[std::size_t(d.index(i, y, x))] = out[std::size_t(i)];
        }
    for (int zz = 0; zz < d.d; ++zz)
        for (int x = 0; x < d.w; ++x) {
            pass(d.h, [&](int i) { return f[std::size_t(d.index(zz, i, x))]; });
            for (int i = 0; i < d.h; ++i) f[std::size_t(d.index(zz, i, x))] = out[std::size_t(i)];
        }
    for (int zz = 0; zz < d.d; ++zz)
        for (int y = 0; y < d.h; ++y) {
            pass(d.w, [&](int i) { return f[std::size_t(d.index(zz, y, i))]; });
            for (int i = 0; i < d.w; ++i) f[std::size_t(d.index(zz, y, i))] = out[std::size_t(i)];
        }
    return f;
}

/// Distance-ordered thinning. Distance levels are visited in increasing
/// order; at each level every remaining voxel at or below it is thinned by
/// directional border passes (six face directions, repeated until stable)
/// so that erosion inside a level is symmetric. Simple points are deleted,
/// curve endpoints are kept. Returns whether anything was deleted.
inline bool thin(PaddedGrid& g, const std::vector<double>& dist2) {
    const Dims3 in = g.inner;
    std::vector<std::pair<double, std::int64_t>> order;  // (squared distance, padded index)
    for (int z = 0; z < in.d; ++z)
        for (int y = 0; y < in.h; ++y)
            for (int x = 0; x < in.w; ++x) {
                const std::int64_t i = g.pad(z, y, x);
                if (g.v[std::size_t(i)]) order.emplace_back(dist2[std::size_t(in.index(z, y, x))], i);
            }
    std::sort(order.begin(), order.end());
    static constexpr std::array<int, 6> faces{cube_pos(-1, 0, 0), cube_pos(1, 0, 0), cube_pos(0, -1, 0),
                                              cube_pos(0, 1, 0),  cube_pos(0, 0, -1), cube_pos(0, 0, 1)};
    std::vector<std::int64_t> active, border;
    bool changed = false;
    std::size_t next = 0;
    while (next < order.size()) {
        const double level = order[next].first;
        for (; next < order.size() && order[next].first == level; ++next) active.push_back(order[next].second);
        std::sort(active.begin(), active.end());
        for (bool again = true; again;) {
            again = false;
            for (int f : faces) {
                // border voxels are fixed when the pass starts, so deletions
                // cannot cascade along the pass direction
                border.clear();
                for (std::int64_t i : active)
                    if (g.v[std::size_t(i)] && !g.v[std::size_t(i + g.off[std::size_t(f)])]) border.push_back(i);
                for (int sub = 0; sub < 8; ++sub)
                    for (std::int64_t i : border) {
                        if (g.parity(i) != sub || g.degree(i) <= 1 || !is_simple_point(g.neighborhood(i))) continue;
                        g.v[std::size_t(i)] = 0;
                        again = changed = true;
                    }
            }
            std::erase_if(active, [&](std::int64_t i) { return !g.v[std::size_t(i)]; });
        }
    }
    return changed;
}

struct Segment {
    std::vector<std::int64_t> voxels;  // ordered along the curve
    bool cycle = false;
    std::int64_t head_junction = -1;   // junction voxel attached before voxels.front()
    std::int64_t tail_junction = -1;   // junction voxel attached after voxels.back()
};

struct SkeletonGraph {
    std::vector<std::int64_t> voxels;     // ascending flat indices
    std::vector<std::int64_t> junctions;  // ascending
    std::vector<std::int64_t> endpoints;  // ascending, degree <= 1
    std::vector<Segment> segments;        // ordered by lowest voxel index
    std::vector<std::vector<std::int64_t>> isolated_junction_clusters;
};

template <typename F>
void for_each_neighbor(const Dims3& d, std::int64_t i, F&& f) {
    const auto c = d.coords(i);
    for (int dz = -1; dz <= 1; ++dz)
        for (int dy = -1; dy <= 1; ++dy)
            for (int dx = -1; dx <= 1; ++dx) {
                if (!dz && !dy && !dx) continue;
                const int z = c[0] + dz, y = c[1] + dy, x = c[2] + dx;
                if (d.contains(z, y, x)) f(d.index(z, y, x));
            }
}

inline SkeletonGraph build_graph(const Mask& s) {
    const Dims3 d = s.dims;
    SkeletonGraph g;
    std::vector<std::int8_t> deg(s.size(), -1);  // -1 = not skeleton
    for (std::int64_t i = 0; i < d.count(); ++i)
        if (s[std::size_t(i)]) g.voxels.push_back(i);
    for (std::int64_t i : g.voxels) {
        int n = 0;
        for_each_neighbor(d, i, [&](std::int64_t j) { n += s[std::size_t(j)] != 0; });
        deg[std::size_t(i)] = std::int8_t(n);
        if (n >= 3) g.junctions.push_back(i);
        if (n <= 1) g.endpoints.push_back(i);
    }
    auto is_j = [&](std::int64_t i) { return deg[std::size_t(i)] >= 3; };
    auto is_n = [&](std::int64_t i) { return deg[std::size_t(i)] >= 0 && deg[std::size_t(i)] < 3; };

    std::vector<std::uint8_t> seen(s.size(), 0);
    std::vector<std::int64_t> comp, stack;
    for (std::int64_t v : g.voxels) {
        if (!is_n(v) || seen[std::size_t(v)]) continue;
        comp.clear();
        stack.assign(1, v);
        seen[std::size_t(v)] = 1;
        while (!stack.empty()) {
            const std::int64_t u = stack.back();
            stack.pop_back();
            comp.push_back(u);
            for_each_neighbor(d, u, [&](std::int64_t w) {
                if (is_n(w) && !seen[std::size_t(w)]) {
                    seen[std::size_t(w)] = 1;
                    stack.push_back(w);
                }
            });
        }
        auto seg_neighbors = [&](std::int64_t u) {
            std::vector<std::int64_t> out;
            for_each_neighbor(d, u, [&](std::int64_t w) {
                if (is_n(w)) out.push_back(w);
            });
            return out;  // ascending because neighbours are visited in index order
        };
        Segment seg;
        std::int64_t start = -1;
        for (std::int64_t u : comp)
            if (seg_neighbors(u).size() <= 1 && (start < 0 || u < start)) start = u;
        seg.cycle = start < 0;
        if (seg.cycle) start = *std::min_element(comp.begin(), comp.end());
        std::int64_t prev = -1, cur = start;
        seg.voxels.push_back(cur);
        for (;;) {
            const auto nbs = seg_neighbors(cur);
            std::int64_t next = -1;
            for (std::int64_t w : nbs)
                if (w != prev) {
                    next = w;
                    break;
                }
            if (next < 0 || next == start) break;
            seg.voxels.push_back(next);
            prev = cur;
            cur = next;
        }
        if (seg.cycle) seg.voxels.push_back(start);
        if (!seg.cycle) {
            std::vector<std::int64_t> jh, jt;
            for_each_neighbor(d, seg.voxels.front(), [&](std::int64_t w) {
                if (is_j(w)) jh.push_back(w);
            });
            for_each_neighbor(d, seg.voxels.back(), [&](std::int64_t w) {
                if (is_j(w)) jt.push_back(w);
            });
            if (!jh.empty()) seg.head_junction = jh.front();
            for (std::int64_t w : jt)
                if (w != seg.head_junction || seg.voxels.size() > 1) {
                    seg.tail_junction = w;
                    break;
                }
            if (seg.voxels.size() == 1 && seg.tail_junction == seg.head_junction) seg.tail_junction = -1;
        }
        g.segments.push_back(std::move(seg));
    }

    // junction clusters that touch no curve voxel form branches of their own
    std::vector<std::uint8_t> jseen(s.size(), 0);
    for (std::int64_t v : g.junctions) {
        if (jseen[std::size_t(v)]) continue;
        std::vector<std::int64_t> cluster;
        bool touches = false;
        stack.assign(1, v);
        jseen[std::size_t(v)] = 1;
        while (!stack.empty()) {
            const std::int64_t u = stack.back();
            stack.pop_back();
            cluster.push_back(u);
            for_each_neighbor(d, u, [&](std::int64_t w) {
                if (is_n(w)) touches = true;
                if (is_j(w) && !jseen[std::size_t(w)]) {
                    jseen[std::size_t(w)] = 1;
                    stack.push_back(w);
                }
            });
        }
        if (!touches) {
            std::sort(cluster.begin(), cluster.end());
            g.isolated_junction_clusters.push_back(std::move(cluster));
        }
    }
    return g;
}

inline double voxel_step(const Dims3& d, std::int64_t a, std::int64_t b) {
    const auto ca = d.coords(a), cb = d.coords(b);
    const int dz = ca[0] - cb[0], dy = ca[1] - cb[1], dx = ca[2] - cb[2];
    return std::sqrt(double(dz * dz + dy * dy + dx * dx));
}

struct EndEstimate {
    std::array<double, 3> dir{};  // unit, pointing out of the curve end
    double radius = 0.0;          // median distance-to-background near the end
    double reach = 0.0;           // mask extent beyond the end along dir
    std::int64_t far = -1;        // voxel attaining the extent
    double area = 0.0;            // cross-section, voxels per unit length just behind the end
    double beyond = 0.0;          // mask voxels reached at or past the end
    // signed distance from the end voxel to the estimated medial-axis end point
    [[nodiscard]] double offset() const { return reach + 0.5 - radius; }
    // the same from voxel counts, taking the cap as a hemisphere of the
    // cross-section's radius; finer than offset() but needs a clean tube
    [[nodiscard]] double volume_offset() const {
        if (!(area > 0.0)) return offset();
        const double r = std::sqrt(area / std::numbers::pi);
        return (beyond - 2.0 / 3.0 * std::numbers::pi * r * r * r) / area;
    }
};

/// Where a tube's medial axis should end, seen from the last voxel of
/// `curve` (ordered towards the free end). The axis ends one inscribed
/// radius short of the cap; the cap is the farthest mask voxel reachable
/// from the end through a cylinder around the end direction, plus half a
/// voxel to its boundary. The same cylinder also gives voxel counts for
/// volume_offset(): the cross-section from a slab just behind the end and
/// the volume past it.
inline std::optional<EndEstimate> estimate_end(const std::vector<std::int64_t>& curve, const Mask& original,
                                               const std::vector<double>& dist2, int window) {
    const Dims3 d = original.dims;
    const std::size_t n = curve.size();
    if (n < 2) return std::nullopt;
    auto centre = [&](std::int64_t v) {
        const auto c = d.coords(v);
        return std::array<double, 3>{double(c[0]), double(c[1]), double(c[2])};
    };
    EndEstimate est;
    const std::size_t k = std::min<std::size_t>(std::size_t(window), n - 1);
    const auto e = centre(curve.back()), b = centre(curve[n - 1 - k]);
    double len = 0.0;
    for (int a = 0; a < 3; ++a) {
        est.dir[std::size_t(a)] = e[std::size_t(a)] - b[std::size_t(a)];
        len += est.dir[std::size_t(a)] * est.dir[std::size_t(a)];
    }
    len = std::sqrt(len);
    if (len == 0.0) return std::nullopt;
    for (auto& c : est.dir) c /= len;

    std::vector<double> radii;
    for (std::size_t i = 0; i < std::min<std::size_t>(2 * std::size_t(window), n); ++i)
        radii.push_back(std::sqrt(dist2[std::size_t(curve[n - 1 - i])]));
    std::nth_element(radii.begin(), radii.begin() + std::ptrdiff_t(radii.size() / 2), radii.end());
    est.radius = radii[radii.size() / 2];

    const double lateral = std::max(1.0, est.radius) + 1.0;
    est.far = curve.back();
    std::unordered_set<std::int64_t> seen{curve.back()};
    std::vector<std::int64_t> stack{curve.back()};
    while (!stack.empty()) {
        const std::int64_t v = stack.back();
        stack.pop_back();
        for_each_neighbor(d, v, [&](std::int64_t w) {
            if (!original[std::size_t(w)] || seen.count(w)) return;
            const auto c = centre(w);
            const double rel[3] = {c[0] - e[0], c[1] - e[1], c[2] - e[2]};
            const double t = rel[0] * est.dir[0] + rel[1] * est.dir[1] + rel[2] * est.dir[2];
            const double l2 = rel[0] * rel[0] + rel[1] * rel[1] + rel[2] * rel[2] - t * t;
            if (t < -0.5 || l2 > lateral * lateral) return;
            seen.insert(w);
            // share of the voxel past the plane through the end voxel
            est.beyond += std::clamp(t + 0.5, 0.0, 1.0);
            if (t > est.reach) {
                est.reach = t;
                est.far = w;
            }
            stack.push_back(w);
        });
    }
    est.beyond += 0.5;  // the end voxel itself
    const int slab = 3, box = slab + int(std::ceil(lateral)) + 1;
    std::int64_t behind = 0;
    for (int dz = -box; dz <= box; ++dz)
        for (int dy = -box; dy <= box; ++dy)
            for (int dx = -box; dx <= box; ++dx) {
                const int z = int(e[0]) + dz, y = int(e[1]) + dy, x = int(e[2]) + dx;
                if (!d.contains(z, y, x) || !original.at(z, y, x)) continue;
                const double t = dz * est.dir[0] + dy * est.dir[1] + dx * est.dir[2];
                const double l2 = double(dz * dz + dy * dy + dx * dx) - t * t;
                if (t < -0.5 && t >= -0.5 - double(slab) && l2 <= lateral * lateral) ++behind;
            }
    est.area = double(behind) / double(slab);
    return est;
}

/// End trimming and spur pruning on the current skeleton; returns whether
/// anything was removed. A free end voxel p is trimmed while its inscribed
/// ball lies inside the ball of the next voxel q, dist(p) + |pq| <= dist(q) +
/// tolerance, so curve ends settle on centres of maximal balls. A terminal
/// segment is removed as a spur when the mask, followed out past its end,
/// sticks out at most `prune_protrusion` voxels from the inscribed balls of
/// the rest of the skeleton.
inline bool prune_spurs(PaddedGrid& grid, const Mask& original, const std::vector<double>& dist2,
                        const SkeletonOptions& opt) {
    const Mask s = grid.unpad(original.spacing);
    const SkeletonGraph g = build_graph(s);
    auto dist = [&](std::int64_t i) { return std::sqrt(dist2[std::size_t(i)]); };
    auto erase = [&](std::int64_t v) {
        const auto c = s.dims.coords(v);
        grid.v[std::size_t(grid.pad(c[0], c[1], c[2]))] = 0;
    };
    auto contained = [&](std::int64_t p, std::int64_t q) {
        return dist(p) + voxel_step(s.dims, p, q) <= dist(q) + opt.trim_tolerance;
    };
    std::vector<std::int64_t> skel;
    for (std::size_t i = 0; i < s.size(); ++i)
        if (s[i]) skel.push_back(std::int64_t(i));
    bool removed = false;
    for (const auto& seg : g.segments) {
        if (seg.cycle) continue;
        const bool head = seg.head_junction >= 0, tail = seg.tail_junction >= 0;
        if (head && tail) continue;  // bridge between junctions
        const auto& vx = seg.voxels;
        std::size_t lo = 0, hi = vx.size();  // surviving range [lo, hi)
        if (!head && !tail) {
            // isolated curve: trim both ends, keep at least one voxel
            while (hi - lo > 1 && contained(vx[lo], vx[lo + 1])) ++lo;
            while (hi - lo > 1 && contained(vx[hi - 1], vx[hi - 2])) --hi;
        } else if (head) {
            // free end at the back
            while (hi > lo && contained(vx[hi - 1], hi - 1 > lo ? vx[hi - 2] : seg.head_junction)) --hi;
        } else {
            while (lo < hi && contained(vx[lo], lo + 1 < hi ? vx[lo + 1] : seg.tail_junction)) ++lo;
        }
        if (opt.prune && head != tail && hi > lo) {
            std::vector<std::int64_t> own(vx.begin(), vx.end());
            std::sort(own.begin(), own.end());
            const std::int64_t j = head ? seg.head_junction : seg.tail_junction;
            std::vector<std::int64_t> curve{j};
            if (head) curve.insert(curve.end(), vx.begin() + std::ptrdiff_t(lo), vx.begin() + std::ptrdiff_t(hi));
            else curve.insert(curve.end(), vx.rbegin() + std::ptrdiff_t(vx.size() - hi), vx.rend() - std::ptrdiff_t(lo));
            const auto est = estimate_end(curve, original, dist2, opt.direction_window);
            const std::int64_t tip = est ? est->far : curve.back();
            // measured against every skeleton ball outside the segment, so a
            // twig folding back along its parent counts as covered
            double protrusion = std::numeric_limits<double>::infinity();
            for (std::int64_t q : skel)
                if (!std::binary_search(own.begin(), own.end(), q))
                    protrusion = std::min(protrusion, voxel_step(s.dims, q, tip) + 0.5 - dist(q));
            if (protrusion <= opt.prune_protrusion) hi = lo;
        }
        if (hi - lo == vx.size()) continue;
        for (std::size_t i = 0; i < vx.size(); ++i)
            if (i < lo || i >= hi) erase(vx[i]);
        removed = true;
    }
    return removed;
}

/// Moves each free curve end to the voxel nearest its estimated medial-axis
/// end point. Thinning leaves tube ends anywhere between that point and the
/// cap tip, depending on how flat the distance map is. Ends too close to the
/// boundary are retracted; short ends are extended towards the cap with
/// voxels touching only their predecessor, so topology and one-voxel
/// thickness are kept.
inline void adjust_ends(Mask& sk, const Mask& original, const std::vector<double>& dist2, int window) {
    const Dims3 d = sk.dims;
    const SkeletonGraph g = build_graph(sk);
    auto adjacent = [&](std::int64_t a, std::int64_t b) {
        const auto p = d.coords(a), q = d.coords(b);
        return std::abs(p[0] - q[0]) <= 1 && std::abs(p[1] - q[1]) <= 1 && std::abs(p[2] - q[2]) <= 1;
    };
    for (const auto& seg : g.segments) {
        if (seg.cycle) continue;
        for (int side = 0; side < 2; ++side) {
            if (side == 0 ? seg.head_junction >= 0 : seg.tail_junction >= 0) continue;
            // curve runs towards the free end; the first `fixed` voxels stay
            std::vector<std::int64_t> curve(seg.voxels.begin(), seg.voxels.end());
            if (side == 0) std::reverse(curve.begin(), curve.end());
            const std::int64_t other = side == 0 ? seg.tail_junction : seg.head_junction;
            if (other >= 0) curve.insert(curve.begin(), other);
            const std::size_t fixed = other >= 0 ? 2 : 1;
            auto est = estimate_end(curve, original, dist2, window);
            if (!est) continue;
            while (est->offset() < -0.5 && curve.size() > fixed + 1) {
                sk[std::size_t(curve.back())] = 0;
                curve.pop_back();
                est = estimate_end(curve, original, dist2, window);
                if (!est) break;
            }
            if (!est) continue;
            // head for the farthest voxel rather than along the noisier curve direction
            const auto e = d.coords(curve.back());
            std::array<double, 3> dir = est->dir;
            if (est->far != curve.back()) {
                const auto f = d.coords(est->far);
                double len = 0.0;
                for (int a = 0; a < 3; ++a) {
                    dir[std::size_t(a)] = double(f[std::size_t(a)] - e[std::size_t(a)]);
                    len += dir[std::size_t(a)] * dir[std::size_t(a)];
                }
                for (auto& c : dir) c /= std::sqrt(len);
            }
            const double dom = std::max({std::abs(dir[0]), std::abs(dir[1]), std::abs(dir[2])});
            const int steps = int(std::floor(est->offset() * dom + 0.5));
            for (int st = 1; st <= steps; ++st) {
                const double t = double(st) / dom;
                const int z = int(std::lround(e[0] + dir[0] * t)), y = int(std::lround(e[1] + dir[1] * t)),
                          x = int(std::lround(e[2] + dir[2] * t));
                if (!d.contains(z, y, x) || !original.at(z, y, x) || sk.at(z, y, x)) break;
                const std::int64_t v = d.index(z, y, x);
                // a corner voxel the new one makes redundant is dropped
                std::size_t keep = curve.size();
                while (keep > fixed && adjacent(v, curve[keep - 2])) --keep;
                bool clash = false;
                for_each_neighbor(d, v, [&](std::int64_t w) {
                    if (!sk[std::size_t(w)]) return;
                    if (std::find(curve.begin() + std::ptrdiff_t(keep - 1), curve.end(), w) == curve.end()) clash = true;
                });
                if (clash) break;
                for (std::size_t i = keep; i < curve.size(); ++i) sk[std::size_t(curve[i])] = 0;
                curve.resize(keep);
                sk[std::size_t(v)] = 1;
                curve.push_back(v);
            }
        }
    }
}

}  // namespace detail

namespace detail {
inline Mask skeleton_pass(const Mask& m, const SkeletonOptions& opt) {
    PaddedGrid g(m);
    const auto dist2 = squared_edt(m);
    for (;;) {
        thin(g, dist2);
        if (!prune_spurs(g, m, dist2, opt)) break;
    }
    Mask out = g.unpad(m.spacing);
    if (opt.adjust_ends) adjust_ends(out, m, dist2, opt.direction_window);
    return out;
}
}  // namespace detail

inline constexpr int kMaxSkeletonPasses = 8;

/// One-voxel-thick, topology-preserving centerline of a binary mask. The
/// thinning pass is repeated on its own output until nothing changes (one
/// repeat on tubular masks), which makes the result idempotent.
inline Mask skeletonize(const Mask& m, const SkeletonOptions& opt = {}) {
    Mask out = detail::skeleton_pass(m, opt);
    for (int k = 1; k < kMaxSkeletonPasses; ++k) {
        Mask next = detail::skeleton_pass(out, opt);
        if (next.data == out.data) break;
        out = std::move(next);
    }
    return out;
}

// ---- branch decomposition --------------------------------------------------

struct Branch {
    std::vector<std::int64_t> voxels;  // junction-free part, ordered
    std::vector<std::int64_t> path;    // voxels with the attached junction voxels at either end
    std::vector<double> step_mm;       // path.size() - 1 smoothed step lengths
    double length_mm = 0.0;
    bool terminal = false;             // at least one end is a free curve endpoint
};

struct SkeletonTree {
    Dims3 dims;
    Spacing spacing{1.0, 1.0, 1.0};
    std::vector<std::int64_t> voxels;
    std::vector<std::int64_t> junctions;
    std::vector<std::int64_t> endpoints;
    std::vector<Branch> branches;

    [[nodiscard]] std::size_t branch_count() const { return branches.size(); }
    [[nodiscard]] double total_length_mm() const {
        double s = 0.0;
        for (const auto& b : branches) s += b.length_mm;
        return s;
    }
};

// branch voxels used to fit the line through each arm at a junction
inline constexpr int kJunctionFitVoxels = 6;

namespace detail {

using Point3 = std::array<double, 3>;

inline Point3 mm_point(const Dims3& d, const Spacing& sp, std::int64_t v) {
    const auto c = d.coords(v);
    return {double(c[0]) * sp[0], double(c[1]) * sp[1], double(c[2]) * sp[2]};
}

struct Line {
    Eigen::Vector3d centre, dir;
};

/// Principal axis of `pts`.
inline std::optional<Line> fit_line(const std::vector<Point3>& pts) {
    if (pts.size() < 2) return std::nullopt;
    Eigen::Vector3d c = Eigen::Vector3d::Zero();
    for (const auto& p : pts) c += Eigen::Vector3d(p[0], p[1], p[2]);
    c /= double(pts.size());
    Eigen::Matrix3d cov = Eigen::Matrix3d::Zero();
    for (const auto& p : pts) {
        const Eigen::Vector3d r = Eigen::Vector3d(p[0], p[1], p[2]) - c;
        cov += r * r.transpose();
    }
    Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> es(cov);
    const Eigen::Vector3d dir = es.eigenvectors().col(2);
    const Eigen::Vector3d span = Eigen::Vector3d(pts.back()[0], pts.back()[1], pts.back()[2]) -
                                 Eigen::Vector3d(pts.front()[0], pts.front()[1], pts.front()[2]);
    if (span.norm() == 0.0) return std::nullopt;
    return Line{c, dir};
}

/// Least-squares meeting point of the branch axes around a junction. Falls
/// back to nothing when the axes are near parallel or the point lies far
/// from the junction.
inline std::optional<Point3> branch_point(const std::vector<Line>& lines, const Point3& junction, double max_shift) {
    if (lines.size() < 2) return std::nullopt;
    Eigen::Matrix3d A = Eigen::Matrix3d::Zero();
    Eigen::Vector3d b = Eigen::Vector3d::Zero();
    for (const auto& l : lines) {
        const Eigen::Matrix3d P = Eigen::Matrix3d::Identity() - l.dir * l.dir.transpose();
        A += P;
        b += P * l.centre;
    }
    Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> es(A);
    if (es.eigenvalues()(0) < 0.05 * double(lines.size())) return std::nullopt;
    const Eigen::Vector3d x = A.ldlt().solve(b);
    if ((x - Eigen::Vector3d(junction[0], junction[1], junction[2])).norm() > max_shift) return std::nullopt;
    return Point3{x(0), x(1), x(2)};
}

/// Replaces the path's end points, dropping interior points that lie past
/// a new end along the path's direction there. `dropped` receives how many
/// points went missing at the head and at the tail.
inline std::vector<Point3> relocate_ends(std::vector<Point3> pts, const std::optional<Point3>& head,
                                         const std::optional<Point3>& tail,
                                         std::array<std::size_t, 2>* dropped = nullptr) {
    auto trim_back = [](std::vector<Point3>& p, const Point3& x) {
        const std::size_t n = p.size();
        const Point3& a = p[n - 1 - std::min<std::size_t>(4, n - 1)];
        Eigen::Vector3d u(p[n - 1][0] - a[0], p[n - 1][1] - a[1], p[n - 1][2] - a[2]);
        p.pop_back();
        if (u.norm() > 0.0)
            while (p.size() > 1 &&
                   Eigen::Vector3d(p.back()[0] - x[0], p.back()[1] - x[1], p.back()[2] - x[2]).dot(u) >= 0.0)
                p.pop_back();
        p.push_back(x);
        return n - p.size();
    };
    std::array<std::size_t, 2> gone{0, 0};
    if (tail) gone[1] = trim_back(pts, *tail);
    if (head) {
        std::reverse(pts.begin(), pts.end());
        gone[0] = trim_back(pts, *head);
        std::reverse(pts.begin(), pts.end());
    }
    if (dropped) *dropped = gone;
    return pts;
}

}  // namespace detail

/// Moving-average smoothing of the path's mm coordinates with a symmetric
/// window truncated at the ends (end points stay fixed), then Euclidean
/// step lengths. Digital zig-zags would otherwise inflate lengths of
/// oblique branches by up to ~8%.
inline std::vector<double> smoothed_steps(const std::vector<detail::Point3>& p, int half_width) {
    const std::size_t n = p.size();
    std::vector<detail::Point3> q(n);
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t h = std::min({std::size_t(std::max(half_width, 0)), i, n - 1 - i});
        std::array<double, 3> acc{0.0, 0.0, 0.0};
        for (std::size_t k = i - h; k <= i + h; ++k)
            for (int a = 0; a < 3; ++a) acc[std::size_t(a)] += p[k][std::size_t(a)];
        for (int a = 0; a < 3; ++a) q[i][std::size_t(a)] = acc[std::size_t(a)] / double(2 * h + 1);
    }
    std::vector<double> steps(n ? n - 1 : 0);
    for (std::size_t i = 0; i + 1 < n; ++i) {
        const double dz = q[i + 1][0] - q[i][0], dy = q[i + 1][1] - q[i][1], dx = q[i + 1][2] - q[i][2];
        steps[i] = std::sqrt(dz * dz + dy * dy + dx * dx);
    }
    return steps;
}

inline std::vector<double> smoothed_steps(const std::vector<std::int64_t>& path, const Dims3& d, const Spacing& sp,
                                          int half_width) {
    std::vector<detail::Point3> p;
    for (std::int64_t v : path) p.push_back(detail::mm_point(d, sp, v));
    return smoothed_steps(p, half_width);
}

/// Splits a skeleton at voxels with three or more neighbours. Every maximal
/// junction-free curve is one branch; a junction cluster touching no curve is
/// a branch of zero length. Branch order follows the lowest voxel index.
/// Lengths run to branch points, not junction voxels: a medial axis forks
/// where the child tubes separate, downstream of where their axes meet, so
/// each junction cluster is placed at the least-squares intersection of
/// lines fitted to the first few voxels of its branches. With the `source`
/// mask the skeleton came from, free ends are likewise moved to their
/// sub-voxel end point estimate (at most one voxel).
inline SkeletonTree decompose_branches(const Mask& skeleton, int smoothing_half_width = 2,
                                       const Mask* source = nullptr, int direction_window = 4) {
    if (source) require_same_dims(source->dims, skeleton.dims, "decompose_branches source");
    const auto g = detail::build_graph(skeleton);
    SkeletonTree t;
    t.dims = skeleton.dims;
    t.spacing = skeleton.spacing;
    t.voxels = g.voxels;
    t.junctions = g.junctions;
    t.endpoints = g.endpoints;
    const Dims3 d = t.dims;
    const Spacing sp = t.spacing;
    for (const auto& seg : g.segments) {
        Branch b;
        b.voxels = seg.cycle ? std::vector<std::int64_t>(seg.voxels.begin(), seg.voxels.end() - 1) : seg.voxels;
        if (seg.head_junction >= 0) b.path.push_back(seg.head_junction);
        b.path.insert(b.path.end(), seg.voxels.begin(), seg.voxels.end());
        if (seg.tail_junction >= 0) b.path.push_back(seg.tail_junction);
        b.terminal = !seg.cycle && (seg.head_junction < 0 || seg.tail_junction < 0);
        t.branches.push_back(std::move(b));
    }

    // junction clusters and the branch ends attached to them
    std::unordered_map<std::int64_t, std::size_t> cluster_of;
    std::vector<std::vector<std::int64_t>> clusters;
    for (std::int64_t j : g.junctions) {
        if (cluster_of.count(j)) continue;
        const std::size_t id = clusters.size();
        clusters.emplace_back();
        std::vector<std::int64_t> stack{j};
        cluster_of[j] = id;
        while (!stack.empty()) {
            const std::int64_t v = stack.back();
            stack.pop_back();
            clusters[id].push_back(v);
            detail::for_each_neighbor(d, v, [&](std::int64_t w) {
                if (skeleton[std::size_t(w)] && !cluster_of.count(w) &&
                    std::binary_search(g.junctions.begin(), g.junctions.end(), w)) {
                    cluster_of[w] = id;
                    stack.push_back(w);
                }
            });
        }
    }
    struct End {
        std::size_t branch;
        bool head;
    };
    std::vector<std::vector<End>> ends(clusters.size());
    for (std::size_t i = 0; i < g.segments.size(); ++i) {
        if (g.segments[i].cycle) continue;
        if (g.segments[i].head_junction >= 0) ends[cluster_of.at(g.segments[i].head_junction)].push_back({i, true});
        if (g.segments[i].tail_junction >= 0) ends[cluster_of.at(g.segments[i].tail_junction)].push_back({i, false});
    }
    std::vector<std::optional<detail::Point3>> head_point(t.branches.size()), tail_point(t.branches.size());
    const double voxel = std::max({sp[0], sp[1], sp[2]});
    for (std::size_t c = 0; c < clusters.size(); ++c) {
        std::vector<detail::Line> lines;
        double reach = 0.0;
        detail::Point3 centre{0.0, 0.0, 0.0};
        for (std::int64_t v : clusters[c]) {
            const auto q = detail::mm_point(d, sp, v);
            for (int a = 0; a < 3; ++a) centre[std::size_t(a)] += q[std::size_t(a)] / double(clusters[c].size());
        }
        for (const auto& e : ends[c]) {
            // the branch's own voxels nearest the junction, at most half the branch
            auto vx = g.segments[e.branch].voxels;
            if (!e.head) std::reverse(vx.begin(), vx.end());
            const std::size_t span = std::max<std::size_t>(3, std::min<std::size_t>(vx.size() / 2, kJunctionFitVoxels));
            std::vector<detail::Point3> pts;
            for (std::size_t k = 0; k < std::min(vx.size(), span); ++k) pts.push_back(detail::mm_point(d, sp, vx[k]));
            if (auto l = detail::fit_line(pts)) lines.push_back(*l);
            if (!pts.empty()) {
                const double dz = pts.front()[0] - centre[0], dy = pts.front()[1] - centre[1],
                             dx = pts.front()[2] - centre[2];
                reach = std::max(reach, std::sqrt(dz * dz + dy * dy + dx * dx));
            }
        }
        if (lines.size() != ends[c].size()) continue;
        const auto bp = detail::branch_point(lines, centre, reach + voxel);
        if (!bp) continue;
        for (const auto& e : ends[c]) (e.head ? head_point : tail_point)[e.branch] = bp;
    }

    if (source) {
        const auto dist2 = detail::squared_edt(*source);
        for (std::size_t i = 0; i < g.segments.size(); ++i) {
            const auto& seg = g.segments[i];
            if (seg.cycle) continue;
            for (int side = 0; side < 2; ++side) {
                if (side == 0 ? seg.head_junction >= 0 : seg.tail_junction >= 0) continue;
                std::vector<std::int64_t> curve = t.branches[i].path;
                if (side == 0) std::reverse(curve.begin(), curve.end());
                const auto est = detail::estimate_end(curve, *source, dist2, direction_window);
                if (!est) continue;
                const double shift = std::clamp(est->volume_offset(), -1.0, 1.0);
                const auto c = d.coords(curve.back());
                detail::Point3 q;
                for (int a = 0; a < 3; ++a)
                    q[std::size_t(a)] = (double(c[std::size_t(a)]) + shift * est->dir[std::size_t(a)]) * sp[std::size_t(a)];
                (side == 0 ? head_point : tail_point)[i] = q;
            }
        }
    }

    for (std::size_t i = 0; i < t.branches.size(); ++i) {
        auto& b = t.branches[i];
        std::vector<detail::Point3> pts;
        for (std::int64_t v : b.path) pts.push_back(detail::mm_point(d, sp, v));
        std::array<std::size_t, 2> dropped{0, 0};
        if (head_point[i] || tail_point[i]) pts = detail::relocate_ends(pts, head_point[i], tail_point[i], &dropped);
        // dropped points become zero steps so step_mm stays aligned with path
        const auto steps = smoothed_steps(pts, smoothing_half_width);
        b.step_mm.assign(dropped[0], 0.0);
        b.step_mm.insert(b.step_mm.end(), steps.begin(), steps.end());
        b.step_mm.resize(b.path.size() - 1, 0.0);
        for (double s : b.step_mm) b.length_mm += s;
    }
    for (const auto& cl : g.isolated_junction_clusters) {
        Branch b;
        b.voxels = cl;
        b.path = cl;
        b.step_mm.assign(cl.size() - 1, 0.0);
        t.branches.push_back(std::move(b));
    }
    return t;
}

}  // namespace cotunet
