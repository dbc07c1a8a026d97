#pragma once

// Central finite-difference oracle for reverse-mode gradients (64-bit only).

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "hdu/tensor.hpp"

namespace hdu {

struct GradCheckResult {
    double max_rel_error = 0.0;
    std::size_t worst_input = 0;
    std::size_t worst_index = 0;
    // (input, coordinate) pairs where f or a derivative was not finite.
    std::vector<std::pair<std::size_t, std::size_t>> non_finite;

    bool ok(double tol) const { return non_finite.empty() && max_rel_error < tol; }
};

using ScalarFn = std::function<Tensord(const std::vector<Tensord>&)>;

/// max over coordinates of |analytic - numeric| / max(1, |numeric|).
/// Inputs are used as given; those with requires_grad=false are skipped.
inline GradCheckResult finite_diff_check(const ScalarFn& f, std::vector<Tensord> inputs, double h = 1e-5) {
    GradCheckResult r;
    for (auto& in : inputs) in.zero_grad();
    Tensord loss = f(inputs);
    backward(loss);
    std::vector<std::vector<double>> analytic;
    for (auto& in : inputs) analytic.emplace_back(in.grad().begin(), in.grad().end());

    NoGradGuard no_grad;
    for (std::size_t k = 0; k < inputs.size(); ++k) {
        if (!inputs[k].requires_grad()) continue;
        auto x = inputs[k].mutable_data();
        for (std::size_t i = 0; i < x.size(); ++i) {
            const double orig = x[i];
            x[i] = orig + h;
            const double fp = f(inputs).item();
            x[i] = orig - h;
            const double fm = f(inputs).item();
            x[i] = orig;
            const double numeric = (fp - fm) / (2.0 * h);
            const double a = analytic[k][i];
            if (!std::isfinite(numeric) || !std::isfinite(a)) {
                r.non_finite.emplace_back(k, i);
                continue;
            }
            const double err = std::abs(a - numeric) / std::max(1.0, std::abs(numeric));
            if (err > r.max_rel_error) {
                r.max_rel_error = err;
                r.worst_input = k;
                r.worst_index = i;
            }
        }
    }
    return r;
}

}  // namespace hdu
