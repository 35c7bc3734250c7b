#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace cotunet {

/// Dimensions of a (batch, channel, depth, height, width) array.
struct Shape5 {
    int n = 0, c = 0, d = 0, h = 0, w = 0;

    [[nodiscard]] std::int64_t spatial() const { return std::int64_t(d) * h * w; }
    [[nodiscard]] std::int64_t numel() const { return std::int64_t(n) * c * spatial(); }
    bool operator==(const Shape5&) const = default;
};

inline std::string to_string(const Shape5& s) {
    std::ostringstream os;
    os << '(' << s.n << ',' << s.c << ',' << s.d << ',' << s.h << ',' << s.w << ')';
    return os.str();
}

/// Dense row-major 5-axis array. W is the fastest axis.
template <typename T>
class Tensor5 {
public:
    using value_type = T;

    Tensor5() = default;
    explicit Tensor5(Shape5 shape, T fill = T(0)) : shape_(shape) {
        if (shape.n < 0 || shape.c < 0 || shape.d < 0 || shape.h < 0 || shape.w < 0)
            throw std::invalid_argument("Tensor5: negative dimension in " + to_string(shape));
        data_.assign(static_cast<std::size_t>(shape.numel()), fill);
    }
    Tensor5(Shape5 shape, std::vector<T> data) : shape_(shape), data_(std::move(data)) {
        if (std::int64_t(data_.size()) != shape.numel())
            throw std::invalid_argument("Tensor5: data length " + std::to_string(data_.size()) +
                                        " does not match dims " + to_string(shape));
    }

    [[nodiscard]] const Shape5& shape() const { return shape_; }
    [[nodiscard]] std::size_t size() const { return data_.size(); }
    [[nodiscard]] T* data() { return data_.data(); }
    [[nodiscard]] const T* data() const { return data_.data(); }
    [[nodiscard]] std::span<T> values() { return data_; }
    [[nodiscard]] std::span<const T> values() const { return data_; }
    [[nodiscard]] std::vector<T>& storage() { return data_; }
    [[nodiscard]] const std::vector<T>& storage() const { return data_; }

    [[nodiscard]] std::int64_t index(int n, int c, int d, int h, int w) const {
        return (((std::int64_t(n) * shape_.c + c) * shape_.d + d) * shape_.h + h) * shape_.w + w;
    }
    T& operator()(int n, int c, int d, int h, int w) { return data_[index(n, c, d, h, w)]; }
    const T& operator()(int n, int c, int d, int h, int w) const { return data_[index(n, c, d, h, w)]; }
    T& operator[](std::size_t i) { return data_[i]; }
    const T& operator[](std::size_t i) const { return data_[i]; }

    /// Pointer to the start of one (batch, channel) volume.
    T* channel(int n, int c) { return data_.data() + (std::int64_t(n) * shape_.c + c) * shape_.spatial(); }
    const T* channel(int n, int c) const {
        return data_.data() + (std::int64_t(n) * shape_.c + c) * shape_.spatial();
    }

    [[nodiscard]] bool all_finite() const {
        for (const T& v : data_)
            if (!std::isfinite(v)) return false;
        return true;
    }

    template <typename U>
    [[nodiscard]] Tensor5<U> cast() const {
        Tensor5<U> out(shape_);
        for (std::size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<U>(data_[i]);
        return out;
    }

private:
    Shape5 shape_{};
    std::vector<T> data_;
};

inline void require_same_shape(const Shape5& a, const Shape5& b, const char* what) {
    if (!(a == b))
        throw std::invalid_argument(std::string(what) + ": shape mismatch " + to_string(a) + " vs " +
                                    to_string(b));
}

}  // namespace cotunet
