#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "hdu/nn/geometry.hpp"
#include "hdu/tensor.hpp"

namespace hdu::nn {

enum class Mode { train, eval };

/// Per-channel affine parameters plus running statistics. gamma and beta are
/// trainable; the running buffers are plain leaves.
template <class T>
struct BatchNormState {
    Tensor<T> gamma;
    Tensor<T> beta;
    Tensor<T> running_mean;
    Tensor<T> running_var;
    double epsilon = 1e-5;
    double momentum = 0.99;  // weight kept by the running statistics per update

    static BatchNormState make(std::size_t channels, double epsilon = 1e-5, double momentum = 0.99) {
        BatchNormState s;
        s.gamma = Tensor<T>::full({channels}, T(1), true);
        s.beta = Tensor<T>::zeros({channels}, true);
        s.running_mean = Tensor<T>::zeros({channels});
        s.running_var = Tensor<T>::full({channels}, T(1));
        s.epsilon = epsilon;
        s.momentum = momentum;
        return s;
    }

    std::size_t channels() const { return gamma.size(); }
};

/// Train mode normalises by batch statistics (biased variance) and folds them
/// into the running buffers; eval mode is the fixed affine map given by the
/// running buffers.
template <class T>
Tensor<T> batchnorm(const Tensor<T>& x, BatchNormState<T>& state, Mode mode) {
    const Layout l = layout_of(x.shape(), "batchnorm");
    if (state.channels() != l.channels)
        throw ShapeError("batchnorm: state has " + std::to_string(state.channels()) + " channels, input " +
                         to_string(x.shape()));
    const std::size_t C = l.channels, S = l.voxels(), N = l.batch;
    const double m = double(N * S);
    const T* xv = x.data().data();
    const T* gamma = state.gamma.data().data();
    const T* beta = state.beta.data().data();

    std::vector<T> mean(C), inv_std(C);
    if (mode == Mode::train) {
        for (std::size_t c = 0; c < C; ++c) {
            double s = 0.0;
            for (std::size_t n = 0; n < N; ++n) {
                const T* p = xv + (n * C + c) * S;
                for (std::size_t i = 0; i < S; ++i) s += p[i];
            }
            const double mu = s / m;
            double v = 0.0;
            for (std::size_t n = 0; n < N; ++n) {
                const T* p = xv + (n * C + c) * S;
                for (std::size_t i = 0; i < S; ++i) v += (p[i] - mu) * (p[i] - mu);
            }
            v /= m;
            mean[c] = T(mu);
            inv_std[c] = T(1.0 / std::sqrt(v + state.epsilon));
            const double unbiased = m > 1 ? v * m / (m - 1) : v;
            auto rm = state.running_mean.mutable_data();
            auto rv = state.running_var.mutable_data();
            rm[c] = T(state.momentum * rm[c] + (1.0 - state.momentum) * mu);
            rv[c] = T(state.momentum * rv[c] + (1.0 - state.momentum) * unbiased);
        }
    } else {
        for (std::size_t c = 0; c < C; ++c) {
            mean[c] = state.running_mean.data()[c];
            inv_std[c] = T(1.0 / std::sqrt(double(state.running_var.data()[c]) + state.epsilon));
        }
    }

    std::vector<T> xhat(x.size()), y(x.size());
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t c = 0; c < C; ++c) {
            const std::size_t base = (n * C + c) * S;
            for (std::size_t i = 0; i < S; ++i) {
                xhat[base + i] = (xv[base + i] - mean[c]) * inv_std[c];
                y[base + i] = gamma[c] * xhat[base + i] + beta[c];
            }
        }

    const bool batch_stats = mode == Mode::train;
    return hdu::detail::make_result<T>(
        "batchnorm", x.shape(), std::move(y), {x, state.gamma, state.beta},
        [xhat = std::move(xhat), inv_std, N, C, S, m, batch_stats](Node<T>& self) {
            auto& xn = *self.inputs[0];
            auto& gn = *self.inputs[1];
            auto& bn = *self.inputs[2];
            const T* dy = self.grad.data();
            for (std::size_t c = 0; c < C; ++c) {
                double sum_dy = 0.0, sum_dy_xhat = 0.0;
                for (std::size_t n = 0; n < N; ++n) {
                    const std::size_t base = (n * C + c) * S;
                    for (std::size_t i = 0; i < S; ++i) {
                        sum_dy += dy[base + i];
                        sum_dy_xhat += double(dy[base + i]) * xhat[base + i];
                    }
                }
                if (gn.requires_grad) gn.ensure_grad()[c] += T(sum_dy_xhat);
                if (bn.requires_grad) bn.ensure_grad()[c] += T(sum_dy);
                if (!xn.requires_grad) continue;
                auto& gx = xn.ensure_grad();
                const double g = gn.value[c];
                const double k = g * inv_std[c];
                for (std::size_t n = 0; n < N; ++n) {
                    const std::size_t base = (n * C + c) * S;
                    for (std::size_t i = 0; i < S; ++i) {
                        if (batch_stats)
                            gx[base + i] += T(k * (dy[base + i] - sum_dy / m - xhat[base + i] * sum_dy_xhat / m));
                        else
                            gx[base + i] += T(k * dy[base + i]);
                    }
                }
            }
        });
}

}  // namespace hdu::nn
