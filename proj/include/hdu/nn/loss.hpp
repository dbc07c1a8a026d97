#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "hdu/tensor.hpp"

namespace hdu::nn {

/// Integer class map shaped (N, spatial...), matching a (N, C, spatial...) prediction.
struct LabelMap {
    Shape shape;
    std::vector<std::uint8_t> values;
};

/// Per-class loss weights, indexed by class id.
struct LossWeights {
    std::vector<double> w{1.0, 3.0, 10.0};

    static LossWeights uniform(std::size_t classes) { return {std::vector<double>(classes, 1.0)}; }

    void validate(std::size_t classes) const {
        if (w.size() != classes)
            throw std::invalid_argument("loss weights: expected " + std::to_string(classes) + " weights, got " +
                                        std::to_string(w.size()));
        for (double v : w)
            if (!(v > 0.0)) throw std::invalid_argument("loss weights must be positive");
    }
};

inline constexpr double kLogFloor = 1e-12;

namespace detail {

inline void check_labels(const Shape& pred, const LabelMap& labels, const char* op) {
    Shape expect{pred[0]};
    expect.insert(expect.end(), pred.begin() + 2, pred.end());
    if (labels.shape != expect || labels.values.size() != numel(expect))
        throw ShapeError(std::string(op) + ": labels " + to_string(labels.shape) + " do not match prediction " +
                         to_string(pred));
    const std::size_t C = pred[1];
    for (auto v : labels.values)
        if (v >= C) throw std::invalid_argument(std::string(op) + ": label " + std::to_string(v) + " outside [0," +
                                                std::to_string(C - 1) + "]");
}

}  // namespace detail

/// -(1/N) sum_i w[y_i] log max(p_i[y_i], 1e-12), N = number of voxels.
template <class T>
Tensor<T> weighted_cross_entropy(const Tensor<T>& probs, const LabelMap& labels, const LossWeights& weights) {
    const Shape& s = probs.shape();
    if (s.size() < 2) throw ShapeError("weighted_cross_entropy: need (N, C, ...)");
    detail::check_labels(s, labels, "weighted_cross_entropy");
    weights.validate(s[1]);
    const std::size_t N = s[0], C = s[1], S = probs.size() / (N * C);
    const double count = double(N * S);
    const T* p = probs.data().data();
    double acc = 0.0;
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t i = 0; i < S; ++i) {
            const std::size_t y = labels.values[n * S + i];
            acc -= weights.w[y] * std::log(std::max(double(p[(n * C + y) * S + i]), kLogFloor));
        }
    return hdu::detail::make_result<T>(
        "weighted_cross_entropy", Shape{}, {T(acc / count)}, {probs},
        [labels = labels.values, w = weights.w, N, C, S, count](Node<T>& self) {
            auto& in = *self.inputs[0];
            auto& g = in.ensure_grad();
            const T scale = self.grad[0];
            for (std::size_t n = 0; n < N; ++n)
                for (std::size_t i = 0; i < S; ++i) {
                    const std::size_t y = labels[n * S + i];
                    const std::size_t k = (n * C + y) * S + i;
                    const double pv = in.value[k];
                    if (pv > kLogFloor) g[k] += T(-scale * w[y] / (count * pv));
                }
        });
}

/// Same loss evaluated from logits through a log-softmax, without the
/// probability floor. Gradient w.r.t. logits is w[y] (p - onehot) / N.
template <class T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits, const LabelMap& labels, const LossWeights& weights) {
    const Shape& s = logits.shape();
    if (s.size() < 2) throw ShapeError("softmax_cross_entropy: need (N, C, ...)");
    detail::check_labels(s, labels, "softmax_cross_entropy");
    weights.validate(s[1]);
    const std::size_t N = s[0], C = s[1], S = logits.size() / (N * C);
    const double count = double(N * S);
    const T* z = logits.data().data();
    std::vector<T> probs(logits.size());
    double acc = 0.0;
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t i = 0; i < S; ++i) {
            const std::size_t base = n * C * S + i;
            double mx = z[base];
            for (std::size_t c = 1; c < C; ++c) mx = std::max(mx, double(z[base + c * S]));
            double total = 0.0;
            for (std::size_t c = 0; c < C; ++c) total += std::exp(double(z[base + c * S]) - mx);
            const double log_total = std::log(total);
            for (std::size_t c = 0; c < C; ++c) probs[base + c * S] = T(std::exp(double(z[base + c * S]) - mx) / total);
            const std::size_t y = labels.values[n * S + i];
            acc -= weights.w[y] * (double(z[base + y * S]) - mx - log_total);
        }
    return hdu::detail::make_result<T>(
        "softmax_cross_entropy", Shape{}, {T(acc / count)}, {logits},
        [probs = std::move(probs), labels = labels.values, w = weights.w, N, C, S, count](Node<T>& self) {
            auto& g = self.inputs[0]->ensure_grad();
            const double scale = self.grad[0];
            for (std::size_t n = 0; n < N; ++n)
                for (std::size_t i = 0; i < S; ++i) {
                    const std::size_t y = labels[n * S + i];
                    const double f = scale * w[y] / count;
                    for (std::size_t c = 0; c < C; ++c) {
                        const std::size_t k = n * C * S + c * S + i;
                        g[k] += T(f * (double(probs[k]) - (c == y ? 1.0 : 0.0)));
                    }
                }
        });
}

}  // namespace hdu::nn
