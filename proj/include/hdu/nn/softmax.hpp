#pragma once

#include <cmath>
#include <vector>

#include "hdu/tensor.hpp"

namespace hdu::nn {

/// Softmax over axis 1 of an (N, C, ...) tensor, stabilised by max-subtraction.
template <class T>
Tensor<T> softmax_channels(const Tensor<T>& x) {
    const Shape& s = x.shape();
    if (s.size() < 2) throw ShapeError("softmax_channels: need (N, C, ...), got " + to_string(s));
    const std::size_t N = s[0], C = s[1], S = x.size() / (N * C);
    std::vector<T> y(x.size());
    const T* xv = x.data().data();
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t i = 0; i < S; ++i) {
            const std::size_t base = n * C * S + i;
            T mx = xv[base];
            for (std::size_t c = 1; c < C; ++c) mx = std::max(mx, xv[base + c * S]);
            T total = T(0);
            for (std::size_t c = 0; c < C; ++c) {
                const T e = std::exp(xv[base + c * S] - mx);
                y[base + c * S] = e;
                total += e;
            }
            for (std::size_t c = 0; c < C; ++c) y[base + c * S] /= total;
        }
    return hdu::detail::make_result<T>("softmax", s, std::move(y), {x}, [N, C, S](Node<T>& self) {
        auto& g = self.inputs[0]->ensure_grad();
        const T* p = self.value.data();
        const T* dy = self.grad.data();
        for (std::size_t n = 0; n < N; ++n)
            for (std::size_t i = 0; i < S; ++i) {
                const std::size_t base = n * C * S + i;
                T dot = T(0);
                for (std::size_t c = 0; c < C; ++c) dot += dy[base + c * S] * p[base + c * S];
                for (std::size_t c = 0; c < C; ++c) g[base + c * S] += p[base + c * S] * (dy[base + c * S] - dot);
            }
    });
}

}  // namespace hdu::nn
