#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace cotunet {

/// (D, H, W) extents; W is the fastest axis.
struct Dims3 {
    int d = 0, h = 0, w = 0;

    [[nodiscard]] std::int64_t count() const { return std::int64_t(d) * h * w; }
    [[nodiscard]] std::int64_t index(int z, int y, int x) const { return (std::int64_t(z) * h + y) * w + x; }
    [[nodiscard]] bool contains(int z, int y, int x) const {
        return z >= 0 && z < d && y >= 0 && y < h && x >= 0 && x < w;
    }
    [[nodiscard]] std::array<int, 3> coords(std::int64_t i) const {
        return {int(i / (std::int64_t(h) * w)), int((i / w) % h), int(i % w)};
    }
    int operator[](int axis) const { return axis == 0 ? d : axis == 1 ? h : w; }
    bool operator==(const Dims3&) const = default;
};

inline std::string to_string(const Dims3& d) {
    std::ostringstream os;
    os << d.d << 'x' << d.h << 'x' << d.w;
    return os.str();
}

using Spacing = std::array<double, 3>;  // mm along (D, H, W)

/// Dense 3D scalar grid with voxel spacing in mm.
template <typename T>
struct Volume {
    Dims3 dims{};
    Spacing spacing{1.0, 1.0, 1.0};
    std::vector<T> data;

    Volume() = default;
    explicit Volume(Dims3 d, Spacing s = {1.0, 1.0, 1.0}, T fill = T(0)) : dims(d), spacing(s) {
        if (d.d < 0 || d.h < 0 || d.w < 0) throw std::invalid_argument("Volume: negative dims " + to_string(d));
        for (double v : s)
            if (!(v > 0)) throw std::invalid_argument("Volume: spacing must be positive");
        data.assign(std::size_t(d.count()), fill);
    }

    T& at(int z, int y, int x) { return data[std::size_t(dims.index(z, y, x))]; }
    const T& at(int z, int y, int x) const { return data[std::size_t(dims.index(z, y, x))]; }
    T& operator[](std::size_t i) { return data[i]; }
    const T& operator[](std::size_t i) const { return data[i]; }
    [[nodiscard]] std::size_t size() const { return data.size(); }
    [[nodiscard]] double voxel_volume() const { return spacing[0] * spacing[1] * spacing[2]; }

    /// Same geometry, new fill.
    template <typename U>
    [[nodiscard]] Volume<U> like(U fill = U(0)) const {
        return Volume<U>(dims, spacing, fill);
    }
};

using Mask = Volume<std::uint8_t>;
using Image = Volume<float>;

inline void require_same_dims(const Dims3& a, const Dims3& b, const char* what) {
    if (!(a == b))
        throw std::invalid_argument(std::string(what) + ": dims " + to_string(a) + " vs " + to_string(b));
}

inline std::int64_t count_foreground(const Mask& m) {
    std::int64_t n = 0;
    for (auto v : m.data) n += v != 0;
    return n;
}

}  // namespace cotunet
