#pragma once

// DenseUNet built from a DenseUNetConfig: stem convolution and max pool, four
// dense blocks joined by compressing transitions, then five upsampling stages
// with long-range summation connections back to the encoder.

#include <optional>
#include <random>
#include <string>
#include <vector>

#include "hdu/arch/config.hpp"
#include "hdu/arch/layers.hpp"

namespace hdu::arch {

/// BN-ReLU-1x1 conv (bottleneck) then BN-ReLU-3x3 conv emitting `growth_rate` channels.
template <class T>
struct MicroBlock {
    BnRelu<T> norm1;
    Conv<T> bottleneck;
    BnRelu<T> norm2;
    Conv<T> conv;

    static MicroBlock make(BuildContext<T>& ctx, const std::string& name, std::size_t in_ch,
                           const DenseUNetConfig& cfg) {
        if (in_ch == 0) throw std::invalid_argument("micro-block needs input channels");
        MicroBlock m;
        m.norm1 = BnRelu<T>::make(ctx, name + ".norm1", in_ch);
        m.bottleneck =
            Conv<T>::make(ctx, name + ".conv1", nn::ConvSpec::make(cfg.dims, 1, 1, cfg.bottleneck_width), in_ch, false);
        m.norm2 = BnRelu<T>::make(ctx, name + ".norm2", cfg.bottleneck_width);
        m.conv = Conv<T>::make(ctx, name + ".conv2", nn::ConvSpec::make(cfg.dims, 3, 1, cfg.growth_rate),
                               cfg.bottleneck_width, false);
        return m;
    }

    std::size_t out_channels() const { return conv.out_channels(); }

    Tensor<T> operator()(const Tensor<T>& x, nn::Mode mode) {
        return conv(norm2(bottleneck(norm1(x, mode)), mode));
    }
};

/// Micro-block i sees the concatenation of the block input and all previous outputs.
template <class T>
struct DenseBlock {
    std::vector<MicroBlock<T>> layers;
    std::size_t in_channels = 0;
    std::size_t out_channels = 0;

    static DenseBlock make(BuildContext<T>& ctx, const std::string& name, std::size_t in_ch, std::size_t repeats,
                           const DenseUNetConfig& cfg) {
        if (repeats == 0) throw std::invalid_argument("dense block needs at least one micro-block");
        DenseBlock b;
        b.in_channels = in_ch;
        std::size_t ch = in_ch;
        for (std::size_t i = 0; i < repeats; ++i) {
            b.layers.push_back(MicroBlock<T>::make(ctx, name + ".layer" + std::to_string(i + 1), ch, cfg));
            ch += b.layers.back().out_channels();
        }
        b.out_channels = ch;
        return b;
    }

    Tensor<T> operator()(const Tensor<T>& x, nn::Mode mode) {
        std::vector<Tensor<T>> features{x};
        Tensor<T> stream = x;
        for (auto& layer : layers) {
            features.push_back(layer(stream, mode));
            stream = concat_channels(features);
        }
        return stream;
    }
};

/// BN-ReLU-1x1 conv with channel compression, then average pooling.
template <class T>
struct Transition {
    BnRelu<T> norm;
    Conv<T> conv;
    nn::Window pool;
    std::size_t out_channels = 0;

    static Transition make(BuildContext<T>& ctx, const std::string& name, std::size_t in_ch,
                           const DenseUNetConfig& cfg) {
        Transition t;
        t.out_channels = compressed(in_ch, cfg.compression);
        if (t.out_channels == 0) throw std::invalid_argument(name + ": compression leaves no channels");
        t.norm = BnRelu<T>::make(ctx, name + ".norm", in_ch);
        t.conv = Conv<T>::make(ctx, name + ".conv", nn::ConvSpec::make(cfg.dims, 1, 1, t.out_channels), in_ch, false);
        t.pool = StrideChain::for_dims(cfg.dims).transition_pool;
        return t;
    }

    Tensor<T> operator()(const Tensor<T>& x, nn::Mode mode) {
        return nn::pool(conv(norm(x, mode)), nn::PoolKind::avg, pool);
    }
};

/// Upsample, add the projected skip feature, then 3x3 conv-BN-ReLU.
template <class T>
struct UpStage {
    nn::Extents3 factors{2, 2, 1};
    std::optional<Conv<T>> skip_projection;
    Conv<T> conv;
    BnRelu<T> norm;

    Tensor<T> operator()(const Tensor<T>& x, const Tensor<T>* skip, bool use_skip, nn::Mode mode) {
        Tensor<T> h = nn::upsample(x, factors);
        if (use_skip && skip_projection && skip) h = add(h, (*skip_projection)(*skip));
        return norm(conv(h), mode);
    }
};

template <class T>
class DenseUNet {
public:
    /// Registers all parameters under `prefix` (e.g. "f2d.") in `params`.
    DenseUNet(const DenseUNetConfig& cfg, ParameterSet<T>& params, const std::string& prefix, std::mt19937_64& rng,
              NormOptions norm = {})
        : cfg_(cfg) {
        cfg_.validate();
        BuildContext<T> ctx{params, rng, norm};
        const StrideChain chain = StrideChain::for_dims(cfg.dims);
        stem_ = Conv<T>::make(ctx, prefix + "conv1", nn::ConvSpec{cfg.dims, chain.stem, cfg.stem_channels},
                              cfg.in_channels, false);
        stem_norm_ = BnRelu<T>::make(ctx, prefix + "conv1.norm", cfg.stem_channels);
        stem_pool_ = chain.stem_pool;
        trace_.push_back(cfg.stem_channels);

        std::size_t ch = cfg.stem_channels;
        std::array<std::size_t, 4> block_out{};
        for (int b = 0; b < 4; ++b) {
            blocks_.push_back(
                DenseBlock<T>::make(ctx, prefix + "block" + std::to_string(b + 1), ch, cfg.block_repeats[b], cfg));
            ch = blocks_.back().out_channels;
            block_out[b] = ch;
            trace_.push_back(ch);
            if (b < 3) {
                transitions_.push_back(Transition<T>::make(ctx, prefix + "transition" + std::to_string(b + 1), ch, cfg));
                ch = transitions_.back().out_channels;
                trace_.push_back(ch);
            }
        }
        final_norm_ = BnRelu<T>::make(ctx, prefix + "block4.norm", ch);

        // Skip sources for upsampling stages 1..4; stage 5 has none.
        const std::array<std::size_t, 4> skip_channels{block_out[2], block_out[1], block_out[0], cfg.stem_channels};
        for (int u = 0; u < 5; ++u) {
            const std::string name = prefix + "up" + std::to_string(u + 1);
            UpStage<T> s;
            s.factors = chain.upsample[u];
            if (u < 4)
                s.skip_projection =
                    Conv<T>::make(ctx, name + ".skip", nn::ConvSpec::make(cfg.dims, 1, 1, ch), skip_channels[u], false);
            s.conv = Conv<T>::make(ctx, name + ".conv", nn::ConvSpec::make(cfg.dims, 3, 1, cfg.upsample_channels[u]),
                                   ch, false);
            s.norm = BnRelu<T>::make(ctx, name + ".norm", cfg.upsample_channels[u]);
            ch = cfg.upsample_channels[u];
            ups_.push_back(std::move(s));
            trace_.push_back(ch);
        }
    }

    const DenseUNetConfig& config() const { return cfg_; }
    void set_unet_connections(bool enabled) { cfg_.unet_connections_enabled = enabled; }
    bool unet_connections() const { return cfg_.unet_connections_enabled; }

    /// Channel counts of the built graph: conv1, then per block [block, transition], then the five upsampling stages.
    const std::vector<std::size_t>& channel_trace() const { return trace_; }
    const std::vector<DenseBlock<T>>& blocks() const { return blocks_; }

    /// Output of upsampling layer 5 (the feature map fed to a classifier).
    Tensor<T> forward(const Tensor<T>& x, nn::Mode mode) {
        check_input(x.shape());
        Tensor<T> conv1 = stem_norm_(stem_(x), mode);
        Tensor<T> h = nn::pool(conv1, nn::PoolKind::max, stem_pool_);
        std::array<Tensor<T>, 4> block_out;
        for (int b = 0; b < 4; ++b) {
            h = blocks_[b](h, mode);
            block_out[b] = h;
            if (b < 3) h = transitions_[b](h, mode);
        }
        h = final_norm_(h, mode);
        const std::array<const Tensor<T>*, 5> skips{&block_out[2], &block_out[1], &block_out[0], &conv1, nullptr};
        for (int u = 0; u < 5; ++u) h = ups_[u](h, skips[u], cfg_.unet_connections_enabled, mode);
        return h;
    }

private:
    void check_input(const Shape& s) const {
        if (s.size() != std::size_t(cfg_.dims) + 2)
            throw ShapeError("DenseUNet: input " + to_string(s) + " does not match a " + std::to_string(cfg_.dims) +
                             "D config");
        if (s[1] != cfg_.in_channels)
            throw ShapeError("DenseUNet: expected " + std::to_string(cfg_.in_channels) + " input channels, got " +
                             to_string(s));
        infer_shapes(cfg_, std::vector<std::size_t>(s.begin() + 2, s.end()));
    }

    DenseUNetConfig cfg_;
    Conv<T> stem_;
    BnRelu<T> stem_norm_;
    nn::Window stem_pool_;
    std::vector<DenseBlock<T>> blocks_;
    std::vector<Transition<T>> transitions_;
    BnRelu<T> final_norm_;
    std::vector<UpStage<T>> ups_;
    std::vector<std::size_t> trace_;
};

/// DenseUNet features plus a 1x1 classifier producing per-class logits.
template <class T>
class DenseUNetSegmenter {
public:
    DenseUNetSegmenter(const DenseUNetConfig& cfg, ParameterSet<T>& params, const std::string& net_prefix,
                       const std::string& cls_prefix, std::mt19937_64& rng, NormOptions norm = {})
        : net_(cfg, params, net_prefix, rng, norm) {
        BuildContext<T> ctx{params, rng, norm};
        classifier_ = Conv<T>::make(ctx, cls_prefix + "conv", nn::ConvSpec::make(cfg.dims, 1, 1, cfg.num_classes),
                                    cfg.feature_channels(), true);
    }

    struct Output {
        Tensor<T> features;
        Tensor<T> logits;
    };

    Output forward(const Tensor<T>& x, nn::Mode mode) {
        Output o;
        o.features = net_.forward(x, mode);
        o.logits = classifier_(o.features);
        return o;
    }

    DenseUNet<T>& net() { return net_; }
    const DenseUNet<T>& net() const { return net_; }
    const Conv<T>& classifier() const { return classifier_; }

private:
    DenseUNet<T> net_;
    Conv<T> classifier_;
};

}  // namespace hdu::arch
