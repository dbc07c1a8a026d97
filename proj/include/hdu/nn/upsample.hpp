#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "hdu/nn/geometry.hpp"
#include "hdu/tensor.hpp"

namespace hdu::nn {

namespace detail {

struct InterpTap {
    std::size_t i0 = 0;
    std::size_t i1 = 0;
    double w = 0.0;  // weight of i1
};

// Aligned-corner sampling: output endpoints coincide with input endpoints.
inline std::vector<InterpTap> interp_taps(std::size_t in, std::size_t out) {
    std::vector<InterpTap> taps(out);
    if (in == 1 || out == 1) return taps;
    const double scale = double(in - 1) / double(out - 1);
    for (std::size_t j = 0; j < out; ++j) {
        const double pos = double(j) * scale;
        std::size_t i0 = static_cast<std::size_t>(std::floor(pos));
        if (i0 >= in - 1) i0 = in - 1;
        taps[j].i0 = i0;
        taps[j].i1 = std::min(i0 + 1, in - 1);
        taps[j].w = pos - double(i0);
    }
    return taps;
}

template <class T>
Tensor<T> interp_axis(const Tensor<T>& x, std::size_t axis, std::size_t factor) {
    const Shape& s = x.shape();
    std::size_t outer = 1, inner = 1;
    for (std::size_t d = 0; d < axis; ++d) outer *= s[d];
    for (std::size_t d = axis + 1; d < s.size(); ++d) inner *= s[d];
    const std::size_t in_len = s[axis], out_len = in_len * factor;
    Shape out_shape = s;
    out_shape[axis] = out_len;
    auto taps = interp_taps(in_len, out_len);

    std::vector<T> y(outer * out_len * inner);
    const T* xv = x.data().data();
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t j = 0; j < out_len; ++j) {
            const T* a = xv + (o * in_len + taps[j].i0) * inner;
            const T* b = xv + (o * in_len + taps[j].i1) * inner;
            T* d = y.data() + (o * out_len + j) * inner;
            const T w = T(taps[j].w);
            for (std::size_t i = 0; i < inner; ++i) d[i] = a[i] + w * (b[i] - a[i]);
        }
    return hdu::detail::make_result<T>(
        "upsample", out_shape, std::move(y), {x}, [taps = std::move(taps), outer, inner, in_len, out_len](Node<T>& self) {
            auto& g = self.inputs[0]->ensure_grad();
            for (std::size_t o = 0; o < outer; ++o)
                for (std::size_t j = 0; j < out_len; ++j) {
                    const T* dy = self.grad.data() + (o * out_len + j) * inner;
                    T* ga = g.data() + (o * in_len + taps[j].i0) * inner;
                    T* gb = g.data() + (o * in_len + taps[j].i1) * inner;
                    const T w = T(taps[j].w);
                    for (std::size_t i = 0; i < inner; ++i) {
                        ga[i] += (T(1) - w) * dy[i];
                        gb[i] += w * dy[i];
                    }
                }
        });
}

}  // namespace detail

/// Separable (bi/tri)linear upsampling by positive integer factors per spatial axis.
template <class T>
Tensor<T> upsample(const Tensor<T>& x, const Extents3& factors) {
    const Layout l = layout_of(x.shape(), "upsample");
    Tensor<T> y = x;
    for (int a = 0; a < l.dims; ++a) {
        if (factors[a] == 0) throw std::invalid_argument("upsample: factors must be positive");
        if (factors[a] != 1) y = detail::interp_axis(y, std::size_t(a) + 2, factors[a]);
    }
    if (l.dims == 2 && factors[2] != 1) throw std::invalid_argument("upsample: 2D input with a z factor");
    return y;
}

}  // namespace hdu::nn
