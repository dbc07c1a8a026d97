#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>

#include "hdu/io/volume.hpp"
#include "hdu/nn/loss.hpp"
#include "hdu/tensor.hpp"

namespace hdu::data {

using io::Extents;
using io::Vec3;
using io::Volume;

inline constexpr double kWindowLow = -200.0;
inline constexpr double kWindowHigh = 250.0;

/// Clamp HU values to [lo, hi].
inline Volume hu_window(Volume v, double lo = kWindowLow, double hi = kWindowHigh) {
    for (auto& x : v.values) x = float(std::clamp<double>(x, lo, hi));
    return v;
}

/// (v - lo) / (hi - lo); maps the window to [0, 1].
inline Volume normalize_intensity(Volume v, double lo = kWindowLow, double hi = kWindowHigh) {
    for (auto& x : v.values) x = float((double(x) - lo) / (hi - lo));
    v.dtype = io::DType::float32;
    return v;
}

enum class Interp { trilinear, nearest };

inline Extents resampled_extents(const Volume& v, const Vec3& target) {
    Extents e{};
    for (int a = 0; a < 3; ++a) {
        if (!(target[a] > 0.0)) throw std::invalid_argument("resample: target spacing must be positive");
        const double n = std::round(double(v.extents[a]) * v.spacing[a] / target[a]);
        if (n < 1.0)
            throw std::invalid_argument("resample: axis " + std::to_string(a) + " would have zero extent (" +
                                        std::to_string(v.extents[a]) + " voxels at " + std::to_string(v.spacing[a]) +
                                        " mm to " + std::to_string(target[a]) + " mm)");
        e[a] = std::size_t(n);
    }
    return e;
}

namespace detail {

// Resamples one axis of an x-fastest grid; output voxel i sits at physical
// offset i*target from the shared origin.
inline std::vector<float> resample_axis(const std::vector<float>& in, const Extents& ext, int axis, std::size_t new_n,
                                        double ratio, Interp mode) {
    Extents out_ext = ext;
    out_ext[axis] = new_n;
    const std::size_t n = ext[axis];
    const std::size_t stride = axis == 0 ? 1 : axis == 1 ? ext[0] : ext[0] * ext[1];
    const std::size_t out_stride = axis == 0 ? 1 : axis == 1 ? out_ext[0] : out_ext[0] * out_ext[1];
    std::vector<std::size_t> lo(new_n), hi(new_n);
    std::vector<double> w(new_n);
    for (std::size_t i = 0; i < new_n; ++i) {
        const double c = std::clamp(double(i) * ratio, 0.0, double(n - 1));
        if (mode == Interp::nearest) {
            lo[i] = hi[i] = std::min(n - 1, std::size_t(std::floor(c + 0.5)));
            w[i] = 0.0;
        } else {
            lo[i] = std::size_t(std::floor(c));
            hi[i] = std::min(n - 1, lo[i] + 1);
            w[i] = c - double(lo[i]);
        }
    }
    std::vector<float> out(out_ext[0] * out_ext[1] * out_ext[2]);
    // Iterate over all lines along `axis`.
    const std::size_t inner = stride, outer = (ext[0] * ext[1] * ext[2]) / (n * stride);
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t r = 0; r < inner; ++r) {
            const float* src = in.data() + o * n * stride + r;
            float* dst = out.data() + o * new_n * out_stride + r;
            for (std::size_t i = 0; i < new_n; ++i) {
                const double a = src[lo[i] * stride], b = src[hi[i] * stride];
                dst[i * out_stride] = w[i] == 0.0 ? float(a) : float(a + w[i] * (b - a));
            }
        }
    return out;
}

}  // namespace detail

/// New extents round(n * spacing / target); images trilinear, labels nearest.
inline Volume resample(const Volume& v, const Vec3& target, Interp mode) {
    v.validate();
    const Extents e = resampled_extents(v, target);
    if (target == v.spacing) return v;
    Volume out = v;
    std::vector<float> values = v.values;
    Extents cur = v.extents;
    for (int a = 0; a < 3; ++a) {
        if (target[a] == v.spacing[a]) continue;
        values = detail::resample_axis(values, cur, a, e[a], target[a] / v.spacing[a], mode);
        cur[a] = e[a];
    }
    out.extents = cur;
    out.spacing = target;
    out.values = std::move(values);
    return out;
}

/// Intensity pipeline shared by training and inference: window, then
/// resample (if a target spacing is set), then normalize to [0, 1].
struct Preprocessing {
    double window_low = kWindowLow;
    double window_high = kWindowHigh;
    std::optional<Vec3> target_spacing;  // native resolution when unset

    Volume apply(const Volume& image) const {
        Volume v = hu_window(image, window_low, window_high);
        if (target_spacing) v = resample(v, *target_spacing, Interp::trilinear);
        return normalize_intensity(std::move(v), window_low, window_high);
    }

    Volume apply_labels(const Volume& labels) const {
        return target_spacing ? resample(labels, *target_spacing, Interp::nearest) : labels;
    }

    std::string to_string() const {
        std::ostringstream os;
        os << "window=" << io::detail::format_double(window_low) << "," << io::detail::format_double(window_high)
           << ";resample=";
        if (target_spacing)
            os << io::detail::format_double((*target_spacing)[0]) << "," << io::detail::format_double((*target_spacing)[1])
               << "," << io::detail::format_double((*target_spacing)[2]);
        else
            os << "native";
        os << ";normalize=window";
        return os.str();
    }

    static Preprocessing parse(const std::string& s) {
        Preprocessing p;
        std::istringstream is(s);
        bool window = false, res = false, norm = false;
        for (std::string item; std::getline(is, item, ';');) {
            const auto eq = item.find('=');
            if (eq == std::string::npos) throw io::FormatError("preprocessing item without '=': " + item);
            const std::string key = item.substr(0, eq), val = item.substr(eq + 1);
            auto split = [&](std::size_t n) {
                std::vector<double> out;
                std::istringstream vs(val);
                for (std::string t; std::getline(vs, t, ',');) out.push_back(io::detail::parse_double(t, key));
                if (out.size() != n) throw io::FormatError("preprocessing '" + key + "' expects " + std::to_string(n) + " values");
                return out;
            };
            if (key == "window") {
                auto w = split(2);
                p.window_low = w[0];
                p.window_high = w[1];
                window = true;
            } else if (key == "resample") {
                if (val != "native") {
                    auto t = split(3);
                    p.target_spacing = Vec3{t[0], t[1], t[2]};
                }
                res = true;
            } else if (key == "normalize") {
                if (val != "window") throw io::FormatError("unsupported normalization '" + val + "'");
                norm = true;
            } else {
                throw io::FormatError("unknown preprocessing key '" + key + "'");
            }
        }
        if (!window || !res || !norm) throw io::FormatError("incomplete preprocessing record: " + s);
        if (!(p.window_high > p.window_low)) throw io::FormatError("empty intensity window");
        return p;
    }
};

// Tensors use (N, C, X, Y, Z) with Z varying fastest; volumes are x-fastest.

template <class T>
Tensor<T> to_tensor(const Volume& v) {
    const auto [X, Y, Z] = v.extents;
    std::vector<T> out(X * Y * Z);
    for (std::size_t z = 0; z < Z; ++z)
        for (std::size_t y = 0; y < Y; ++y)
            for (std::size_t x = 0; x < X; ++x) out[(x * Y + y) * Z + z] = T(v.at(x, y, z));
    return Tensor<T>(Shape{1, 1, X, Y, Z}, std::move(out), false);
}

/// Stacks equally sized volumes into one (n, 1, X, Y, Z) batch.
template <class T>
Tensor<T> to_tensor_batch(const std::vector<const Volume*>& vs) {
    if (vs.empty()) throw std::invalid_argument("to_tensor_batch: no volumes");
    const auto [X, Y, Z] = vs[0]->extents;
    std::vector<T> out;
    out.reserve(vs.size() * X * Y * Z);
    for (auto* v : vs) {
        if (v->extents != vs[0]->extents) throw ShapeError("to_tensor_batch: volumes differ in extents");
        auto t = to_tensor<T>(*v);
        out.insert(out.end(), t.data().begin(), t.data().end());
    }
    return Tensor<T>(Shape{vs.size(), 1, X, Y, Z}, std::move(out), false);
}

inline nn::LabelMap to_label_map(const std::vector<const Volume*>& vs) {
    if (vs.empty()) throw std::invalid_argument("to_label_map: no volumes");
    const auto [X, Y, Z] = vs[0]->extents;
    nn::LabelMap m{Shape{vs.size(), X, Y, Z}, {}};
    m.values.reserve(vs.size() * X * Y * Z);
    for (auto* v : vs) {
        if (v->extents != vs[0]->extents) throw ShapeError("to_label_map: volumes differ in extents");
        for (std::size_t x = 0; x < X; ++x)
            for (std::size_t y = 0; y < Y; ++y)
                for (std::size_t z = 0; z < Z; ++z) m.values.push_back(std::uint8_t(v->at(x, y, z)));
    }
    return m;
}

/// Channel `c` of case `n` of an (N, C, X, Y, Z) tensor as an x-fastest volume.
template <class T>
Volume channel_volume(const Tensor<T>& t, std::size_t n, std::size_t c, const Vec3& spacing) {
    const Shape& s = t.shape();
    if (s.size() != 5) throw ShapeError("channel_volume: expected rank 5, got " + to_string(s));
    const std::size_t X = s[2], Y = s[3], Z = s[4];
    Volume v = Volume::make({X, Y, Z}, spacing);
    const T* p = t.data().data() + (n * s[1] + c) * X * Y * Z;
    for (std::size_t x = 0; x < X; ++x)
        for (std::size_t y = 0; y < Y; ++y)
            for (std::size_t z = 0; z < Z; ++z) v.at(x, y, z) = float(p[(x * Y + y) * Z + z]);
    return v;
}

}  // namespace hdu::data
