#pragma once

#include <algorithm>
#include <cstddef>
#include <utility>
#include <string>
#include <vector>

#include "hdu/gemm.hpp"
#include "hdu/nn/geometry.hpp"
#include "hdu/tensor.hpp"

namespace hdu::nn {

struct ConvSpec {
    int dims = 2;
    Window window;
    std::size_t out_channels = 0;

    static ConvSpec make(int dims, std::size_t kernel, std::size_t stride, std::size_t out_channels) {
        return {dims, Window::cube(dims, kernel, stride), out_channels};
    }

    /// Weight shape (Cout, Cin, k0, k1[, k2]).
    Shape weight_shape(std::size_t in_channels) const {
        Shape s{out_channels, in_channels, window.kernel[0], window.kernel[1]};
        if (dims == 3) s.push_back(window.kernel[2]);
        return s;
    }
};

namespace detail {

// Output indices o in [lo, hi) map to o*stride + offset inside [0, len).
inline std::pair<std::size_t, std::size_t> valid_range(std::size_t len, std::size_t n_out, std::size_t stride,
                                                       std::ptrdiff_t offset) {
    if (offset >= std::ptrdiff_t(len)) return {0, 0};
    const std::size_t lo = offset >= 0 ? 0 : (std::size_t(-offset) + stride - 1) / stride;
    const std::size_t hi = std::min(n_out, std::size_t(std::ptrdiff_t(len) - 1 - offset) / stride + 1);
    return {std::min(lo, hi), hi};
}

// d[o] = src[(o*stride + offset) * step] where that index lies in [0, len), else 0.
template <class T>
void gather_line(const T* src, std::size_t len, std::size_t step, std::size_t n_out, std::size_t stride,
                 std::ptrdiff_t offset, T* d) {
    const auto [lo, hi] = valid_range(len, n_out, stride, offset);
    std::fill(d, d + lo, T(0));
    if (stride == 1 && step == 1) {
        std::copy(src + (std::ptrdiff_t(lo) + offset), src + (std::ptrdiff_t(hi) + offset), d + lo);
    } else {
        for (std::size_t o = lo; o < hi; ++o) d[o] = src[std::size_t(std::ptrdiff_t(o * stride) + offset) * step];
    }
    std::fill(d + hi, d + n_out, T(0));
}

// Adjoint of gather_line.
template <class T>
void scatter_line(const T* s, std::size_t len, std::size_t step, std::size_t n_out, std::size_t stride,
                  std::ptrdiff_t offset, T* dst) {
    const auto [lo, hi] = valid_range(len, n_out, stride, offset);
    for (std::size_t o = lo; o < hi; ++o) dst[std::size_t(std::ptrdiff_t(o * stride) + offset) * step] += s[o];
}

// Calls f(row, line_src_offset_in_channel, o_outer, k_inner, outer_valid) for
// every im2col line. A line runs along the innermost non-trivial spatial axis.
struct LinePlan {
    bool planar = false;  // 2D: lines along axis 1
    std::size_t line_len = 0, line_out = 0, line_stride = 0, line_pad = 0, line_kernel = 0;
};

inline LinePlan line_plan(const Layout& in, const Window& w, const WindowPlan& plan) {
    LinePlan lp;
    lp.planar = in.spatial[2] == 1 && w.kernel[2] == 1 && plan.out[2] == 1;
    const int a = lp.planar ? 1 : 2;
    lp.line_len = in.spatial[a];
    lp.line_out = plan.out[a];
    lp.line_stride = w.stride[a];
    lp.line_pad = plan.pad_lo[a];
    lp.line_kernel = w.kernel[a];
    return lp;
}

template <class T>
void im2col(const T* x, const Layout& in, const Window& w, const WindowPlan& plan, T* col) {
    const auto [o0n, o1n, o2n] = plan.out;
    const std::size_t P = o0n * o1n * o2n;
    const auto [s0, s1, s2] = in.spatial;
    const LinePlan lp = line_plan(in, w, plan);
    std::size_t row = 0;
    for (std::size_t c = 0; c < in.channels; ++c) {
        const T* xc = x + c * s0 * s1 * s2;
        for (std::size_t k0 = 0; k0 < w.kernel[0]; ++k0)
            for (std::size_t k1 = 0; k1 < w.kernel[1]; ++k1)
                for (std::size_t k2 = 0; k2 < w.kernel[2]; ++k2, ++row) {
                    T* dst = col + row * P;
                    for (std::size_t o0 = 0; o0 < o0n; ++o0) {
                        const std::ptrdiff_t i0 = std::ptrdiff_t(o0 * w.stride[0] + k0) - std::ptrdiff_t(plan.pad_lo[0]);
                        const bool in0 = i0 >= 0 && i0 < std::ptrdiff_t(s0);
                        if (lp.planar) {
                            T* d = dst + o0 * o1n;
                            if (!in0)
                                std::fill_n(d, o1n, T(0));
                            else
                                gather_line(xc + std::size_t(i0) * s1, s1, 1, o1n, w.stride[1],
                                            std::ptrdiff_t(k1) - std::ptrdiff_t(plan.pad_lo[1]), d);
                            continue;
                        }
                        for (std::size_t o1 = 0; o1 < o1n; ++o1) {
                            const std::ptrdiff_t i1 =
                                std::ptrdiff_t(o1 * w.stride[1] + k1) - std::ptrdiff_t(plan.pad_lo[1]);
                            T* d = dst + (o0 * o1n + o1) * o2n;
                            if (!in0 || i1 < 0 || i1 >= std::ptrdiff_t(s1)) {
                                std::fill_n(d, o2n, T(0));
                                continue;
                            }
                            gather_line(xc + (std::size_t(i0) * s1 + std::size_t(i1)) * s2, s2, 1, o2n, w.stride[2],
                                        std::ptrdiff_t(k2) - std::ptrdiff_t(plan.pad_lo[2]), d);
                        }
                    }
                }
    }
}

template <class T>
void col2im(const T* col, const Layout& in, const Window& w, const WindowPlan& plan, T* dx) {
    const auto [o0n, o1n, o2n] = plan.out;
    const std::size_t P = o0n * o1n * o2n;
    const auto [s0, s1, s2] = in.spatial;
    const LinePlan lp = line_plan(in, w, plan);
    std::size_t row = 0;
    for (std::size_t c = 0; c < in.channels; ++c) {
        T* xc = dx + c * s0 * s1 * s2;
        for (std::size_t k0 = 0; k0 < w.kernel[0]; ++k0)
            for (std::size_t k1 = 0; k1 < w.kernel[1]; ++k1)
                for (std::size_t k2 = 0; k2 < w.kernel[2]; ++k2, ++row) {
                    const T* src = col + row * P;
                    for (std::size_t o0 = 0; o0 < o0n; ++o0) {
                        const std::ptrdiff_t i0 = std::ptrdiff_t(o0 * w.stride[0] + k0) - std::ptrdiff_t(plan.pad_lo[0]);
                        if (i0 < 0 || i0 >= std::ptrdiff_t(s0)) continue;
                        if (lp.planar) {
                            scatter_line(src + o0 * o1n, s1, 1, o1n, w.stride[1],
                                         std::ptrdiff_t(k1) - std::ptrdiff_t(plan.pad_lo[1]),
                                         xc + std::size_t(i0) * s1);
                            continue;
                        }
                        for (std::size_t o1 = 0; o1 < o1n; ++o1) {
                            const std::ptrdiff_t i1 =
                                std::ptrdiff_t(o1 * w.stride[1] + k1) - std::ptrdiff_t(plan.pad_lo[1]);
                            if (i1 < 0 || i1 >= std::ptrdiff_t(s1)) continue;
                            scatter_line(src + (o0 * o1n + o1) * o2n, s2, 1, o2n, w.stride[2],
                                         std::ptrdiff_t(k2) - std::ptrdiff_t(plan.pad_lo[2]),
                                         xc + (std::size_t(i0) * s1 + std::size_t(i1)) * s2);
                        }
                    }
                }
    }
}

/// Reusable per-thread buffer; contents are unspecified on return.
template <class T>
std::vector<T>& scratch(int slot) {
    thread_local std::vector<T> buffers[3];
    return buffers[slot];
}

inline bool is_pointwise(const Window& w) {
    return w.volume() == 1 && w.stride[0] == 1 && w.stride[1] == 1 && w.stride[2] == 1;
}

}  // namespace detail

/// Zero-padded convolution with ceil(in/stride) output extents.
/// `bias` may be undefined.
template <class T>
Tensor<T> conv(const Tensor<T>& x, const ConvSpec& spec, const Tensor<T>& weight, const Tensor<T>& bias = {}) {
    const Layout in = layout_of(x.shape(), "conv");
    if (in.dims != spec.dims)
        throw ShapeError("conv: input " + to_string(x.shape()) + " does not have " + std::to_string(spec.dims) +
                         " spatial axes");
    const Shape expected_w = spec.weight_shape(in.channels);
    if (weight.shape() != expected_w)
        throw ShapeError("conv: channel mismatch, input " + to_string(x.shape()) + " needs weight " +
                         to_string(expected_w) + ", got " + to_string(weight.shape()));
    if (bias.defined() && bias.shape() != Shape{spec.out_channels})
        throw ShapeError("conv: bias shape " + to_string(bias.shape()));

    const Window w = spec.window;
    const WindowPlan plan = plan_window(in, w);
    Layout out = in;
    out.channels = spec.out_channels;
    out.spatial = plan.out;

    const std::size_t P = out.voxels();
    const std::size_t CK = in.channels * w.volume();
    const std::size_t Cout = spec.out_channels;
    const bool pointwise = detail::is_pointwise(w);

    std::vector<T> y(numel(out.shape()), T(0));
    std::vector<T>& col = detail::scratch<T>(0);
    if (!pointwise) col.resize(CK * P);
    const T* W = weight.data().data();
    for (std::size_t n = 0; n < in.batch; ++n) {
        const T* xn = x.data().data() + n * in.channels * in.voxels();
        T* yn = y.data() + n * Cout * P;
        if (bias.defined())
            for (std::size_t o = 0; o < Cout; ++o) std::fill_n(yn + o * P, P, bias.data()[o]);
        const T* cols = xn;
        if (!pointwise) {
            detail::im2col(xn, in, w, plan, col.data());
            cols = col.data();
        }
        gemm::nn(Cout, P, CK, W, CK, cols, P, yn, P);
    }

    std::vector<Tensor<T>> inputs{x, weight};
    if (bias.defined()) inputs.push_back(bias);
    return hdu::detail::make_result<T>(
        "conv", out.shape(), std::move(y), std::move(inputs), [in, w, plan, P, CK, Cout, pointwise](Node<T>& self) {
            auto& xn_node = *self.inputs[0];
            auto& w_node = *self.inputs[1];
            Node<T>* b_node = self.inputs.size() > 2 ? self.inputs[2].get() : nullptr;
            std::vector<T>& col = detail::scratch<T>(0);
            std::vector<T>& dcol = detail::scratch<T>(1);
            std::vector<T>& scratch = detail::scratch<T>(2);
            if (!pointwise) col.resize(CK * P);
            const std::size_t in_stride = in.channels * in.voxels();
            for (std::size_t n = 0; n < in.batch; ++n) {
                const T* dy = self.grad.data() + n * Cout * P;
                const T* xn = xn_node.value.data() + n * in_stride;
                if (b_node && b_node->requires_grad) {
                    auto& gb = b_node->ensure_grad();
                    for (std::size_t o = 0; o < Cout; ++o) {
                        T acc = T(0);
                        for (std::size_t p = 0; p < P; ++p) acc += dy[o * P + p];
                        gb[o] += acc;
                    }
                }
                const T* cols = xn;
                if (!pointwise && (w_node.requires_grad)) {
                    detail::im2col(xn, in, w, plan, col.data());
                    cols = col.data();
                }
                if (w_node.requires_grad)
                    gemm::nt(Cout, P, CK, dy, P, cols, P, w_node.ensure_grad().data(), CK, scratch);
                if (xn_node.requires_grad) {
                    T* dx = xn_node.ensure_grad().data() + n * in_stride;
                    if (pointwise) {
                        gemm::tn(Cout, P, CK, w_node.value.data(), CK, dy, P, dx, P);
                    } else {
                        dcol.resize(CK * P);
                        gemm::tn(Cout, P, CK, w_node.value.data(), CK, dy, P, dcol.data(), P, false);
                        detail::col2im(dcol.data(), in, w, plan, dx);
                    }
                }
            }
        });
}

}  // namespace hdu::nn
