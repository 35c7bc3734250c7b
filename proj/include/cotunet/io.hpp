#pragma once

// On-disk formats.
//
// VOL1: a JSON header file plus a raw payload file next to it.
//   {"format": "VOL1", "dims": [D, H, W], "spacing_mm": [sd, sh, sw],
//    "dtype": "f32" | "u8", "byte_order": "little", "payload": "<file name>"}
// The payload holds D*H*W row-major voxels (W fastest). The payload name is
// relative to the header's directory; by default it is the header path with
// the extension replaced by ".raw".
//
// COTUNET1 checkpoint: 8-byte magic "COTUNET1", little-endian u64 header
// length, compact JSON header {config, epoch, metrics, parameter_count},
// then parameter_count little-endian float32 values in canonical order.

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cotunet/config.hpp"
#include "cotunet/unet.hpp"
#include "cotunet/volume.hpp"

namespace cotunet {

namespace fs = std::filesystem;

struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

namespace detail {

template <typename T>
constexpr const char* dtype_name() {
    if constexpr (std::is_same_v<T, float>) return "f32";
    else if constexpr (std::is_same_v<T, std::uint8_t>) return "u8";
    else static_assert(sizeof(T) == 0, "VOL1 stores f32 or u8");
}

inline std::size_t dtype_size(const std::string& t) {
    if (t == "f32") return 4;
    if (t == "u8") return 1;
    return 0;
}

// Host values to little-endian bytes and back; a no-op copy on LE hosts.
template <typename T>
void to_le(const T* src, std::size_t n, char* dst) {
    std::memcpy(dst, src, n * sizeof(T));
    if constexpr (std::endian::native == std::endian::big && sizeof(T) > 1)
        for (std::size_t i = 0; i < n; ++i) std::reverse(dst + i * sizeof(T), dst + (i + 1) * sizeof(T));
}

template <typename T>
void from_le(const char* src, std::size_t n, T* dst) {
    if constexpr (std::endian::native == std::endian::big && sizeof(T) > 1) {
        std::vector<char> tmp(src, src + n * sizeof(T));
        for (std::size_t i = 0; i < n; ++i) std::reverse(tmp.data() + i * sizeof(T), tmp.data() + (i + 1) * sizeof(T));
        std::memcpy(dst, tmp.data(), n * sizeof(T));
    } else {
        std::memcpy(dst, src, n * sizeof(T));
    }
}

inline std::string read_file(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw IoError("cannot open " + p.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline void write_file(const fs::path& p, const char* data, std::size_t n) {
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + p.string());
    out.write(data, std::streamsize(n));
    if (!out) throw IoError("short write to " + p.string());
}

inline void write_text(const fs::path& p, const std::string& s) { write_file(p, s.data(), s.size()); }

}  // namespace detail

// ---- VOL1 ---------------------------------------------------------------------

struct VolumeHeader {
    Dims3 dims;
    Spacing spacing{1, 1, 1};
    std::string dtype;
    fs::path payload;  // resolved against the header's directory
};

inline fs::path default_payload_path(const fs::path& header) {
    fs::path p = header;
    p.replace_extension(".raw");
    return p;
}

inline VolumeHeader read_volume_header(const fs::path& header) {
    const std::string text = detail::read_file(header);
    const std::string where = "read_volume: " + header.string();
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        throw IoError(where + ": bad JSON header: " + e.what());
    }
    auto need = [&](const char* k) -> const json& {
        if (!j.is_object() || !j.contains(k)) throw IoError(where + ": header misses '" + k + "'");
        return j[k];
    };
    if (!j.is_object() || j.value("format", "") != "VOL1") throw IoError(where + ": not a VOL1 header");
    VolumeHeader h;
    const json& d = need("dims");
    if (!d.is_array() || d.size() != 3 || !d[0].is_number_integer() || !d[1].is_number_integer() ||
        !d[2].is_number_integer())
        throw IoError(where + ": dims must be three integers");
    h.dims = {d[0].get<int>(), d[1].get<int>(), d[2].get<int>()};
    if (h.dims.d < 0 || h.dims.h < 0 || h.dims.w < 0) throw IoError(where + ": negative dims");
    const json& s = need("spacing_mm");
    if (!s.is_array() || s.size() != 3) throw IoError(where + ": spacing_mm must be three numbers");
    for (int a = 0; a < 3; ++a) {
        if (!s[std::size_t(a)].is_number()) throw IoError(where + ": spacing_mm must be three numbers");
        h.spacing[std::size_t(a)] = s[std::size_t(a)].get<double>();
    }
    const json& t = need("dtype");
    if (!t.is_string() || !detail::dtype_size(t.get<std::string>()))
        throw IoError(where + ": unknown dtype " + t.dump() + " (expected \"f32\" or \"u8\")");
    h.dtype = t.get<std::string>();
    const json& bo = need("byte_order");
    if (bo != "little") throw IoError(where + ": unsupported byte_order " + bo.dump());
    const json& p = need("payload");
    if (!p.is_string()) throw IoError(where + ": payload must be a file name");
    h.payload = header.parent_path() / p.get<std::string>();
    return h;
}

template <typename T>
void write_volume(const Volume<T>& v, const fs::path& header) {
    const fs::path payload = default_payload_path(header);
    const json j = {{"format", "VOL1"},
                    {"dims", json::array({v.dims.d, v.dims.h, v.dims.w})},
                    {"spacing_mm", v.spacing},
                    {"dtype", detail::dtype_name<T>()},
                    {"byte_order", "little"},
                    {"payload", payload.filename().string()}};
    std::vector<char> bytes(v.size() * sizeof(T));
    detail::to_le(v.data.data(), v.size(), bytes.data());
    detail::write_file(payload, bytes.data(), bytes.size());
    detail::write_text(header, j.dump(2) + "\n");
}

template <typename T>
Volume<T> read_volume(const fs::path& header) {
    const VolumeHeader h = read_volume_header(header);
    const std::string where = "read_volume: " + header.string();
    if (h.dtype != detail::dtype_name<T>())
        throw IoError(where + ": dtype is " + h.dtype + ", expected " + detail::dtype_name<T>());
    const std::string bytes = detail::read_file(h.payload);
    const std::size_t expected = std::size_t(h.dims.count()) * sizeof(T);
    if (bytes.size() != expected)
        throw IoError(where + ": payload " + h.payload.filename().string() + " has " + std::to_string(bytes.size()) +
                      " bytes, expected " + std::to_string(expected) + " (" + to_string(h.dims) + " " + h.dtype + ")");
    Volume<T> v(h.dims, h.spacing);
    detail::from_le(bytes.data(), v.size(), v.data.data());
    return v;
}

/// Reads a u8 volume and checks that it is binary.
inline Mask read_mask(const fs::path& header) {
    Mask m = read_volume<std::uint8_t>(header);
    for (auto v : m.data)
        if (v > 1) throw IoError("read_mask: " + header.string() + " holds values other than 0 and 1");
    return m;
}

// ---- checkpoints --------------------------------------------------------------

inline constexpr char kCheckpointMagic[8] = {'C', 'O', 'T', 'U', 'N', 'E', 'T', '1'};

struct Checkpoint {
    UNetConfig config;
    int epoch = 0;
    json metrics = json::object();
    UNetParams<float> params;
};

inline std::string serialize_checkpoint(const Checkpoint& c) {
    const auto flat = c.params.flatten();
    const json header = {{"config", to_json(c.config)},
                         {"epoch", c.epoch},
                         {"metrics", c.metrics},
                         {"parameter_count", flat.size()}};
    const std::string h = header.dump();
    std::string out(kCheckpointMagic, 8);
    char len[8];
    const std::uint64_t n = h.size();
    detail::to_le(&n, 1, len);
    out.append(len, 8);
    out += h;
    const std::size_t off = out.size();
    out.resize(off + flat.size() * 4);
    detail::to_le(flat.data(), flat.size(), out.data() + off);
    return out;
}

inline Checkpoint deserialize_checkpoint(const std::string& bytes, const std::string& name = "checkpoint") {
    const std::string where = "read_checkpoint: " + name;
    if (bytes.size() < 16 || std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0)
        throw IoError(where + ": missing COTUNET1 magic");
    std::uint64_t hlen = 0;
    detail::from_le(bytes.data() + 8, 1, &hlen);
    if (hlen > bytes.size() - 16) throw IoError(where + ": header length " + std::to_string(hlen) + " past end of file");
    json h;
    try {
        h = json::parse(bytes.substr(16, std::size_t(hlen)));
    } catch (const json::parse_error& e) {
        throw IoError(where + ": bad JSON header: " + e.what());
    }
    Checkpoint c;
    try {
        c.config = network_from_json(h.at("config"), "checkpoint.config");
        c.epoch = h.at("epoch").get<int>();
        c.metrics = h.at("metrics");
        const auto count = h.at("parameter_count").get<std::uint64_t>();
        c.params = unet_init<float>(c.config, 0);
        if (count != std::uint64_t(c.params.parameter_count()))
            throw IoError(where + ": header declares " + std::to_string(count) + " parameters, config implies " +
                          std::to_string(c.params.parameter_count()));
    } catch (const json::exception& e) {
        throw IoError(where + ": malformed header: " + e.what());
    }
    const std::size_t n = std::size_t(c.params.parameter_count());
    const std::size_t expected = 16 + std::size_t(hlen) + n * 4;
    if (bytes.size() != expected)
        throw IoError(where + ": file has " + std::to_string(bytes.size()) + " bytes, expected " +
                      std::to_string(expected));
    std::vector<float> flat(n);
    detail::from_le(bytes.data() + 16 + hlen, n, flat.data());
    c.params.unflatten(flat);
    return c;
}

inline void write_checkpoint(const Checkpoint& c, const fs::path& path) {
    const std::string b = serialize_checkpoint(c);
    detail::write_file(path, b.data(), b.size());
}

inline Checkpoint read_checkpoint(const fs::path& path) {
    return deserialize_checkpoint(detail::read_file(path), path.string());
}

}  // namespace cotunet
