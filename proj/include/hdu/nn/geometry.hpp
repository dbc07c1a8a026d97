#pragma once

// Layout helpers shared by the spatial operators. Feature tensors are
// (N, C, s0, s1) in 2D and (N, C, s0, s1, s2) in 3D; internally 2D is treated
// as 3D with a unit trailing axis.

#include <array>
#include <cstddef>
#include <string>

#include "hdu/tensor.hpp"

namespace hdu::nn {

using Extents3 = std::array<std::size_t, 3>;

struct Layout {
    std::size_t batch = 0;
    std::size_t channels = 0;
    Extents3 spatial{1, 1, 1};
    int dims = 2;

    std::size_t voxels() const { return spatial[0] * spatial[1] * spatial[2]; }

    Shape shape() const {
        Shape s{batch, channels, spatial[0], spatial[1]};
        if (dims == 3) s.push_back(spatial[2]);
        return s;
    }
};

inline Layout layout_of(const Shape& s, const char* op) {
    if (s.size() != 4 && s.size() != 5)
        throw ShapeError(std::string(op) + ": expected (N,C,spatial...) with 2 or 3 spatial axes, got " + to_string(s));
    Layout l;
    l.batch = s[0];
    l.channels = s[1];
    l.dims = static_cast<int>(s.size()) - 2;
    l.spatial = {s[2], s[3], s.size() == 5 ? s[4] : 1};
    return l;
}

/// Padding that yields ceil(in / stride) outputs; the low side gets at most
/// (k - 1) / 2 so odd kernels are centred (pad 3 for 7, pad 1 for 3).
struct AxisPadding {
    std::size_t out = 0;
    std::size_t lo = 0;
    std::size_t hi = 0;
};

inline AxisPadding same_padding(std::size_t in, std::size_t kernel, std::size_t stride) {
    AxisPadding p;
    p.out = (in + stride - 1) / stride;
    const std::size_t needed = (p.out - 1) * stride + kernel;
    const std::size_t total = needed > in ? needed - in : 0;
    p.lo = std::min((kernel - 1) / 2, total);
    p.hi = total - p.lo;
    return p;
}

/// Per-axis kernel/stride triple; unused trailing axes are 1.
struct Window {
    Extents3 kernel{1, 1, 1};
    Extents3 stride{1, 1, 1};

    static Window make(int dims, std::initializer_list<std::size_t> k, std::initializer_list<std::size_t> s) {
        Window w;
        std::size_t i = 0;
        for (auto v : k) w.kernel[i++] = v;
        i = 0;
        for (auto v : s) w.stride[i++] = v;
        if (dims == 2) w.kernel[2] = w.stride[2] = 1;
        return w;
    }
    static Window cube(int dims, std::size_t k, std::size_t s) {
        Window w;
        for (int a = 0; a < dims; ++a) {
            w.kernel[a] = k;
            w.stride[a] = s;
        }
        return w;
    }
    std::size_t volume() const { return kernel[0] * kernel[1] * kernel[2]; }
};

struct WindowPlan {
    Extents3 out{1, 1, 1};
    Extents3 pad_lo{0, 0, 0};
};

inline WindowPlan plan_window(const Layout& in, const Window& w) {
    WindowPlan plan;
    for (int a = 0; a < 3; ++a) {
        auto p = same_padding(in.spatial[a], w.kernel[a], w.stride[a]);
        plan.out[a] = p.out;
        plan.pad_lo[a] = p.lo;
    }
    return plan;
}

}  // namespace hdu::nn
