#pragma once

// Volume container: a text header `<name>.hdr` next to a raw little-endian
// payload `<name>.raw`, x varying fastest.
//
//   hdu-volume 1
//   extents 64 64 16
//   spacing 0.69 0.69 1
//   origin 0 0 0
//   dtype float32

#include <array>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "hdu/io/error.hpp"

namespace hdu::io {

enum class DType : std::uint8_t { float32, int16, uint8 };

inline const char* dtype_name(DType t) {
    switch (t) {
        case DType::float32: return "float32";
        case DType::int16: return "int16";
        case DType::uint8: return "uint8";
    }
    return "?";
}

inline std::size_t dtype_size(DType t) { return t == DType::float32 ? 4 : t == DType::int16 ? 2 : 1; }

inline DType parse_dtype(const std::string& s) {
    if (s == "float32") return DType::float32;
    if (s == "int16") return DType::int16;
    if (s == "uint8") return DType::uint8;
    throw FormatError("unknown volume dtype '" + s + "' (expected float32, int16 or uint8)");
}

using Extents = std::array<std::size_t, 3>;  // (W, H, D) = (x, y, z)
using Vec3 = std::array<double, 3>;

/// Image (HU) or label volume. Values are held as float whatever the stored
/// dtype; integer dtypes require integral in-range values when written.
struct Volume {
    Extents extents{0, 0, 0};
    Vec3 spacing{1.0, 1.0, 1.0};
    Vec3 origin{0.0, 0.0, 0.0};
    DType dtype = DType::float32;
    std::vector<float> values;

    static Volume make(Extents e, Vec3 spacing, DType dtype = DType::float32, float fill = 0.0f) {
        Volume v;
        v.extents = e;
        v.spacing = spacing;
        v.dtype = dtype;
        v.values.assign(e[0] * e[1] * e[2], fill);
        return v;
    }

    std::size_t voxel_count() const { return extents[0] * extents[1] * extents[2]; }
    std::size_t index(std::size_t x, std::size_t y, std::size_t z) const { return x + extents[0] * (y + extents[1] * z); }
    float& at(std::size_t x, std::size_t y, std::size_t z) { return values[index(x, y, z)]; }
    float at(std::size_t x, std::size_t y, std::size_t z) const { return values[index(x, y, z)]; }

    void validate() const {
        for (int a = 0; a < 3; ++a)
            if (!(spacing[a] > 0.0) || !std::isfinite(spacing[a]))
                throw FormatError("volume spacing must be positive on every axis");
        if (values.size() != voxel_count())
            throw FormatError("volume holds " + std::to_string(values.size()) + " values, extents imply " +
                              std::to_string(voxel_count()));
    }

    bool same_grid(const Volume& o) const { return extents == o.extents; }

    bool operator==(const Volume& o) const {
        if (extents != o.extents || dtype != o.dtype || values.size() != o.values.size()) return false;
        for (int a = 0; a < 3; ++a)
            if (std::bit_cast<std::uint64_t>(spacing[a]) != std::bit_cast<std::uint64_t>(o.spacing[a]) ||
                std::bit_cast<std::uint64_t>(origin[a]) != std::bit_cast<std::uint64_t>(o.origin[a]))
                return false;
        for (std::size_t i = 0; i < values.size(); ++i)
            if (std::bit_cast<std::uint32_t>(values[i]) != std::bit_cast<std::uint32_t>(o.values[i])) return false;
        return true;
    }
};

namespace detail {

inline std::string format_double(double v) {
    char buf[64];
    auto r = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, r.ptr);
}

inline double parse_double(const std::string& s, const std::string& what) {
    double v = 0;
    auto r = std::from_chars(s.data(), s.data() + s.size(), v);
    if (r.ec != std::errc() || r.ptr != s.data() + s.size()) throw FormatError("bad number '" + s + "' in " + what);
    return v;
}

inline std::size_t parse_size(const std::string& s, const std::string& what) {
    std::size_t v = 0;
    auto r = std::from_chars(s.data(), s.data() + s.size(), v);
    if (r.ec != std::errc() || r.ptr != s.data() + s.size()) throw FormatError("bad integer '" + s + "' in " + what);
    return v;
}

inline std::string read_file(const std::filesystem::path& p) {
    std::ifstream is(p, std::ios::binary);
    if (!is) throw FormatError("cannot open " + p.string());
    return std::string((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
}

inline void write_file(const std::filesystem::path& p, const std::string& bytes) {
    std::ofstream os(p, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot write " + p.string());
    os.write(bytes.data(), std::streamsize(bytes.size()));
    if (!os) throw std::runtime_error("write failed: " + p.string());
}

}  // namespace detail

inline std::filesystem::path header_path(std::filesystem::path p) { return p.replace_extension(".hdr"); }
inline std::filesystem::path payload_path(std::filesystem::path p) { return p.replace_extension(".raw"); }

inline std::string encode_header(const Volume& v) {
    std::string h = "hdu-volume 1\n";
    h += "extents " + std::to_string(v.extents[0]) + " " + std::to_string(v.extents[1]) + " " +
         std::to_string(v.extents[2]) + "\n";
    h += "spacing";
    for (double s : v.spacing) h += " " + detail::format_double(s);
    h += "\norigin";
    for (double o : v.origin) h += " " + detail::format_double(o);
    h += "\ndtype " + std::string(dtype_name(v.dtype)) + "\n";
    return h;
}

inline std::string encode_payload(const Volume& v) {
    std::string out;
    out.reserve(v.values.size() * dtype_size(v.dtype));
    auto put = [&out](std::uint32_t bits, std::size_t bytes) {
        for (std::size_t i = 0; i < bytes; ++i) out.push_back(char((bits >> (8 * i)) & 0xff));
    };
    for (std::size_t i = 0; i < v.values.size(); ++i) {
        const float x = v.values[i];
        if (v.dtype == DType::float32) {
            put(std::bit_cast<std::uint32_t>(x), 4);
            continue;
        }
        const double lo = v.dtype == DType::int16 ? -32768.0 : 0.0;
        const double hi = v.dtype == DType::int16 ? 32767.0 : 255.0;
        if (!(x >= lo && x <= hi) || std::nearbyint(x) != x)
            throw FormatError("value " + detail::format_double(x) + " at voxel " + std::to_string(i) +
                              " does not fit dtype " + dtype_name(v.dtype));
        if (v.dtype == DType::int16)
            put(std::uint16_t(std::int16_t(x)), 2);
        else
            put(std::uint8_t(x), 1);
    }
    return out;
}

/// Parses header text; the returned volume has no values yet.
inline Volume decode_header(const std::string& text) {
    std::istringstream is(text);
    std::string line;
    if (!std::getline(is, line) || line != "hdu-volume 1") throw FormatError("not a volume header (bad first line)");
    Volume v;
    bool seen[4] = {false, false, false, false};
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        std::string key;
        ls >> key;
        std::vector<std::string> f;
        for (std::string t; ls >> t;) f.push_back(t);
        auto want = [&](std::size_t n) {
            if (f.size() != n) throw FormatError("header field '" + key + "' expects " + std::to_string(n) + " values");
        };
        if (key == "extents") {
            want(3);
            for (int a = 0; a < 3; ++a) v.extents[a] = detail::parse_size(f[a], "extents");
            seen[0] = true;
        } else if (key == "spacing") {
            want(3);
            for (int a = 0; a < 3; ++a) v.spacing[a] = detail::parse_double(f[a], "spacing");
            seen[1] = true;
        } else if (key == "origin") {
            want(3);
            for (int a = 0; a < 3; ++a) v.origin[a] = detail::parse_double(f[a], "origin");
            seen[2] = true;
        } else if (key == "dtype") {
            want(1);
            v.dtype = parse_dtype(f[0]);
            seen[3] = true;
        } else {
            throw FormatError("unknown header field '" + key + "'");
        }
    }
    const char* names[4] = {"extents", "spacing", "origin", "dtype"};
    for (int i = 0; i < 4; ++i)
        if (!seen[i]) throw FormatError(std::string("volume header lacks '") + names[i] + "'");
    for (int a = 0; a < 3; ++a)
        if (!(v.spacing[a] > 0.0)) throw FormatError("volume header spacing must be positive");
    return v;
}

inline void decode_payload(Volume& v, const std::string& bytes) {
    const std::size_t n = v.voxel_count(), w = dtype_size(v.dtype);
    if (bytes.size() != n * w)
        throw FormatError("payload has " + std::to_string(bytes.size()) + " bytes, header implies " +
                          std::to_string(n * w) + " (" + std::to_string(n) + " voxels of " + dtype_name(v.dtype) + ")");
    v.values.resize(n);
    auto get = [&bytes](std::size_t off, std::size_t len) {
        std::uint32_t b = 0;
        for (std::size_t i = 0; i < len; ++i) b |= std::uint32_t(static_cast<unsigned char>(bytes[off + i])) << (8 * i);
        return b;
    };
    for (std::size_t i = 0; i < n; ++i) {
        const std::uint32_t b = get(i * w, w);
        if (v.dtype == DType::float32)
            v.values[i] = std::bit_cast<float>(b);
        else if (v.dtype == DType::int16)
            v.values[i] = float(std::int16_t(std::uint16_t(b)));
        else
            v.values[i] = float(b);
    }
}

/// Writes `<path>.hdr` and `<path>.raw` (any extension on `path` is replaced).
inline void write_volume(const Volume& v, const std::filesystem::path& path) {
    v.validate();
    const std::string payload = encode_payload(v);
    detail::write_file(payload_path(path), payload);
    detail::write_file(header_path(path), encode_header(v));
}

inline Volume read_volume(const std::filesystem::path& path) {
    Volume v = decode_header(detail::read_file(header_path(path)));
    decode_payload(v, detail::read_file(payload_path(path)));
    return v;
}

}  // namespace hdu::io
