#pragma once

#include <limits>
#include <string>
#include <vector>

#include "hdu/nn/geometry.hpp"
#include "hdu/tensor.hpp"

namespace hdu::nn {

enum class PoolKind { max, avg };

namespace detail {

inline void check_pool_window(const Layout& in, const Window& w) {
    for (int a = 0; a < 3; ++a) {
        const std::size_t padded = in.spatial[a] + 2 * ((w.kernel[a] - 1) / 2);
        if (w.kernel[a] > padded)
            throw ShapeError("pool: window " + std::to_string(w.kernel[a]) + " exceeds padded extent " +
                             std::to_string(padded) + " on axis " + std::to_string(a));
    }
}

// Calls fn(out_index, in_index) for every valid (unpadded) tap, in window order.
template <class Fn>
void for_each_tap(const Layout& in, const Window& w, const WindowPlan& plan, Fn&& fn) {
    const auto [o0n, o1n, o2n] = plan.out;
    const auto [s0, s1, s2] = in.spatial;
    std::size_t out_idx = 0;
    for (std::size_t o0 = 0; o0 < o0n; ++o0)
        for (std::size_t o1 = 0; o1 < o1n; ++o1)
            for (std::size_t o2 = 0; o2 < o2n; ++o2, ++out_idx) {
                for (std::size_t k0 = 0; k0 < w.kernel[0]; ++k0) {
                    const std::ptrdiff_t i0 = std::ptrdiff_t(o0 * w.stride[0] + k0) - std::ptrdiff_t(plan.pad_lo[0]);
                    if (i0 < 0 || i0 >= std::ptrdiff_t(s0)) continue;
                    for (std::size_t k1 = 0; k1 < w.kernel[1]; ++k1) {
                        const std::ptrdiff_t i1 =
                            std::ptrdiff_t(o1 * w.stride[1] + k1) - std::ptrdiff_t(plan.pad_lo[1]);
                        if (i1 < 0 || i1 >= std::ptrdiff_t(s1)) continue;
                        for (std::size_t k2 = 0; k2 < w.kernel[2]; ++k2) {
                            const std::ptrdiff_t i2 =
                                std::ptrdiff_t(o2 * w.stride[2] + k2) - std::ptrdiff_t(plan.pad_lo[2]);
                            if (i2 < 0 || i2 >= std::ptrdiff_t(s2)) continue;
                            fn(out_idx, (std::size_t(i0) * s1 + std::size_t(i1)) * s2 + std::size_t(i2));
                        }
                    }
                }
            }
}

}  // namespace detail

/// Max pooling ignores padded taps; ties resolve to the first tap in window
/// order. Average pooling divides by the number of valid taps.
template <class T>
Tensor<T> pool(const Tensor<T>& x, PoolKind kind, const Window& w) {
    const Layout in = layout_of(x.shape(), "pool");
    detail::check_pool_window(in, w);
    const WindowPlan plan = plan_window(in, w);
    Layout out = in;
    out.spatial = plan.out;
    const std::size_t Pin = in.voxels(), Pout = out.voxels(), planes = in.batch * in.channels;

    std::vector<T> y(planes * Pout);
    if (kind == PoolKind::max) {
        std::vector<std::size_t> argmax(planes * Pout);
        std::vector<T> best(Pout);
        std::vector<std::size_t> best_idx(Pout);
        for (std::size_t pl = 0; pl < planes; ++pl) {
            const T* xp = x.data().data() + pl * Pin;
            std::fill(best.begin(), best.end(), -std::numeric_limits<T>::infinity());
            std::fill(best_idx.begin(), best_idx.end(), std::size_t(-1));
            detail::for_each_tap(in, w, plan, [&](std::size_t o, std::size_t i) {
                if (best_idx[o] == std::size_t(-1) || xp[i] > best[o]) {
                    best[o] = xp[i];
                    best_idx[o] = i;
                }
            });
            std::copy(best.begin(), best.end(), y.begin() + pl * Pout);
            std::copy(best_idx.begin(), best_idx.end(), argmax.begin() + pl * Pout);
        }
        return hdu::detail::make_result<T>(
            "max_pool", out.shape(), std::move(y), {x}, [argmax = std::move(argmax), Pin, Pout, planes](Node<T>& self) {
                auto& g = self.inputs[0]->ensure_grad();
                for (std::size_t pl = 0; pl < planes; ++pl)
                    for (std::size_t o = 0; o < Pout; ++o)
                        g[pl * Pin + argmax[pl * Pout + o]] += self.grad[pl * Pout + o];
            });
    }

    std::vector<T> count(Pout, T(0));
    detail::for_each_tap(in, w, plan, [&](std::size_t o, std::size_t) { count[o] += T(1); });
    for (std::size_t pl = 0; pl < planes; ++pl) {
        const T* xp = x.data().data() + pl * Pin;
        T* yp = y.data() + pl * Pout;
        detail::for_each_tap(in, w, plan, [&](std::size_t o, std::size_t i) { yp[o] += xp[i]; });
        for (std::size_t o = 0; o < Pout; ++o) yp[o] /= count[o];
    }
    return hdu::detail::make_result<T>(
        "avg_pool", out.shape(), std::move(y), {x}, [in, w, plan, count, Pin, Pout, planes](Node<T>& self) {
            auto& g = self.inputs[0]->ensure_grad();
            for (std::size_t pl = 0; pl < planes; ++pl) {
                T* gp = g.data() + pl * Pin;
                const T* dy = self.grad.data() + pl * Pout;
                detail::for_each_tap(in, w, plan, [&](std::size_t o, std::size_t i) { gp[i] += dy[o] / count[o]; });
            }
        });
}

}  // namespace hdu::nn
