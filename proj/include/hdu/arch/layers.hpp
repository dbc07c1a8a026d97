#pragma once

#include <random>
#include <string>

#include "hdu/arch/params.hpp"
#include "hdu/nn.hpp"

namespace hdu::arch {

struct NormOptions {
    double epsilon = 1e-5;
    double momentum = 0.99;
};

/// Everything a layer needs while registering its parameters.
template <class T>
struct BuildContext {
    ParameterSet<T>& params;
    std::mt19937_64& rng;
    NormOptions norm;
};

template <class T>
struct Conv {
    nn::ConvSpec spec;
    Tensor<T> weight;
    Tensor<T> bias;  // undefined when the layer has none

    static Conv make(BuildContext<T>& ctx, const std::string& name, const nn::ConvSpec& spec, std::size_t in_channels,
                     bool with_bias) {
        Conv c;
        c.spec = spec;
        c.weight = ctx.params.add_parameter(name + ".weight", he_normal<T>(spec.weight_shape(in_channels), ctx.rng));
        if (with_bias) c.bias = ctx.params.add_parameter(name + ".bias", Tensor<T>::zeros({spec.out_channels}));
        return c;
    }

    std::size_t in_channels() const { return weight.dim(1); }
    std::size_t out_channels() const { return spec.out_channels; }

    Tensor<T> operator()(const Tensor<T>& x) const { return nn::conv(x, spec, weight, bias); }
};

template <class T>
struct BnRelu {
    nn::BatchNormState<T> state;

    static BnRelu make(BuildContext<T>& ctx, const std::string& name, std::size_t channels) {
        BnRelu b;
        b.state = nn::BatchNormState<T>::make(channels, ctx.norm.epsilon, ctx.norm.momentum);
        ctx.params.add_parameter(name + ".gamma", b.state.gamma);
        ctx.params.add_parameter(name + ".beta", b.state.beta);
        ctx.params.add_buffer(name + ".running_mean", b.state.running_mean);
        ctx.params.add_buffer(name + ".running_var", b.state.running_var);
        return b;
    }

    Tensor<T> operator()(const Tensor<T>& x, nn::Mode mode) { return relu(nn::batchnorm(x, state, mode)); }
};

}  // namespace hdu::arch
