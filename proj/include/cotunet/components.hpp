#pragma once

// Connected components of binary volumes under 6-, 18- or 26-adjacency.

#include <array>
#include <cstdint>
#include <cstdlib>
#include <stdexcept>
#include <string>
#include <vector>

#include "cotunet/volume.hpp"

namespace cotunet {

/// Neighbour offsets (dz, dy, dx) for the given connectivity, centre excluded.
inline std::vector<std::array<int, 3>> neighbor_offsets(int connectivity) {
    if (connectivity != 6 && connectivity != 18 && connectivity != 26)
        throw std::invalid_argument("connectivity must be 6, 18 or 26, got " + std::to_string(connectivity));
    std::vector<std::array<int, 3>> out;
    for (int dz = -1; dz <= 1; ++dz)
        for (int dy = -1; dy <= 1; ++dy)
            for (int dx = -1; dx <= 1; ++dx) {
                const int l1 = std::abs(dz) + std::abs(dy) + std::abs(dx);
                if (l1 == 0) continue;
                if (connectivity == 6 && l1 > 1) continue;
                if (connectivity == 18 && l1 > 2) continue;
                out.push_back({dz, dy, dx});
            }
    return out;
}

struct ComponentLabels {
    std::vector<std::int32_t> label;    // per voxel, -1 = background
    std::vector<std::int64_t> sizes;    // per component
    std::vector<std::int64_t> first;    // lowest flat index of each component
    [[nodiscard]] std::size_t count() const { return sizes.size(); }
};

/// Labels are assigned in scan order of each component's lowest flat index.
inline ComponentLabels label_components(const Mask& m, int connectivity = 26) {
    const auto offs = neighbor_offsets(connectivity);
    const Dims3 d = m.dims;
    ComponentLabels out;
    out.label.assign(m.size(), -1);
    std::vector<std::int64_t> stack;
    for (std::int64_t i = 0; i < d.count(); ++i) {
        if (!m[std::size_t(i)] || out.label[std::size_t(i)] >= 0) continue;
        const auto id = std::int32_t(out.sizes.size());
        std::int64_t size = 0;
        out.label[std::size_t(i)] = id;
        stack.push_back(i);
        while (!stack.empty()) {
            const std::int64_t v = stack.back();
            stack.pop_back();
            ++size;
            const auto c = d.coords(v);
            for (const auto& o : offs) {
                const int z = c[0] + o[0], y = c[1] + o[1], x = c[2] + o[2];
                if (!d.contains(z, y, x)) continue;
                const std::int64_t n = d.index(z, y, x);
                if (!m[std::size_t(n)] || out.label[std::size_t(n)] >= 0) continue;
                out.label[std::size_t(n)] = id;
                stack.push_back(n);
            }
        }
        out.sizes.push_back(size);
        out.first.push_back(i);
    }
    return out;
}

inline std::size_t count_components(const Mask& m, int connectivity = 26) {
    return label_components(m, connectivity).count();
}

/// Keeps the component with the most voxels; ties go to the component whose
/// lowest flat index is smallest. Empty in, empty out.
inline Mask largest_connected_component(const Mask& m, int connectivity = 26) {
    const auto cc = label_components(m, connectivity);
    Mask out = m.like<std::uint8_t>();
    if (cc.count() == 0) return out;
    std::size_t best = 0;
    for (std::size_t k = 1; k < cc.count(); ++k)
        if (cc.sizes[k] > cc.sizes[best]) best = k;
    for (std::size_t i = 0; i < m.size(); ++i) out[i] = cc.label[i] == std::int32_t(best) ? 1 : 0;
    return out;
}

/// Euler characteristic of the foreground taken as a union of closed unit
/// cubes (26-adjacency): vertices - edges + faces - cubes. A solid with no
/// tunnels or cavities has 1 per component.
inline std::int64_t euler_characteristic(const Mask& m) {
    const Dims3 d = m.dims;
    auto fg = [&](int z, int y, int x) { return d.contains(z, y, x) && m.at(z, y, x) != 0; };
    std::int64_t v = 0, e = 0, f = 0, c = 0;
    // every cell is counted once from its lowest corner
    for (int z = 0; z <= d.d; ++z)
        for (int y = 0; y <= d.h; ++y)
            for (int x = 0; x <= d.w; ++x) {
                // vertex at corner (z, y, x) is shared by voxels (z-1..z, y-1..y, x-1..x)
                bool any = false;
                for (int a = -1; a <= 0 && !any; ++a)
                    for (int b = -1; b <= 0 && !any; ++b)
                        for (int cc = -1; cc <= 0 && !any; ++cc) any = fg(z + a, y + b, x + cc);
                v += any;
                // edges from this corner along +x, +y, +z
                e += fg(z - 1, y - 1, x) || fg(z - 1, y, x) || fg(z, y - 1, x) || fg(z, y, x);
                e += fg(z - 1, y, x - 1) || fg(z - 1, y, x) || fg(z, y, x - 1) || fg(z, y, x);
                e += fg(z, y - 1, x - 1) || fg(z, y - 1, x) || fg(z, y, x - 1) || fg(z, y, x);
                // faces with this corner as lowest vertex, normal to x, y, z
                f += fg(z, y, x - 1) || fg(z, y, x);
                f += fg(z, y - 1, x) || fg(z, y, x);
                f += fg(z - 1, y, x) || fg(z, y, x);
                c += fg(z, y, x);
            }
    return v - e + f - c;
}

}  // namespace cotunet
