#pragma once

// Shared helpers for the test suites: seeded random tensors and small
// brute-force references that stay independent of the library code paths.

#include <cstdint>
#include <random>
#include <vector>

#include "hdu/tensor.hpp"

namespace hdu::testing {

inline std::vector<double> random_values(std::size_t n, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
    std::uniform_real_distribution<double> u(lo, hi);
    std::vector<double> v(n);
    for (auto& x : v) x = u(rng);
    return v;
}

inline Tensord random_tensor(const Shape& s, std::mt19937_64& rng, bool requires_grad = true, double lo = -1.0,
                             double hi = 1.0) {
    return Tensord(s, random_values(numel(s), rng, lo, hi), requires_grad);
}

/// Values bounded away from zero, so ReLU kinks stay further than h from any sample.
inline Tensord random_tensor_off_zero(const Shape& s, std::mt19937_64& rng, bool requires_grad = true) {
    auto v = random_values(numel(s), rng, 0.05, 1.0);
    std::bernoulli_distribution sign(0.5);
    for (auto& x : v)
        if (sign(rng)) x = -x;
    return Tensord(s, std::move(v), requires_grad);
}

inline std::size_t uniform_int(std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
    return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

}  // namespace hdu::testing
