#pragma once

#include <cmath>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "hdu/arch/params.hpp"

namespace hdu {

/// A computation produced a NaN or infinity.
class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace hdu

namespace hdu::train {

template <class T>
struct OptimizerState {
    std::map<std::string, std::vector<T>> velocity;
    std::size_t iteration = 0;
};

/// Classic momentum: v <- mu v - lr g, p <- p + v. Buffers and frozen
/// parameters are skipped. Every gradient is checked before anything is
/// written, so a non-finite gradient leaves parameters and state untouched.
template <class T>
void sgd_step(arch::ParameterSet<T>& params, OptimizerState<T>& state, double lr, double momentum) {
    for (auto& [name, e] : params.entries()) {
        if (e.buffer || e.frozen) continue;
        for (T g : e.tensor.grad())
            if (!std::isfinite(double(g)))
                throw NumericError("non-finite gradient in " + name + " at iteration " +
                                   std::to_string(state.iteration));
    }
    const T mu = T(momentum), eta = T(lr);
    for (auto& [name, e] : params.entries()) {
        if (e.buffer || e.frozen) continue;
        Tensor<T> p = e.tensor;
        auto& v = state.velocity[name];
        if (v.empty()) v.assign(p.size(), T(0));
        if (v.size() != p.size()) throw ShapeError("velocity for " + name + " does not match its parameter");
        auto g = p.grad();
        auto w = p.mutable_data();
        for (std::size_t i = 0; i < v.size(); ++i) {
            v[i] = mu * v[i] - eta * g[i];
            w[i] += v[i];
        }
    }
    ++state.iteration;
}

}  // namespace hdu::train
