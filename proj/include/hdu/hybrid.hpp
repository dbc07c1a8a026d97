#pragma once

// Bridges between volumes and 2D slice triplets, and the hybrid 2D/3D model.

#include <algorithm>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "hdu/arch/denseunet.hpp"
#include "hdu/nn.hpp"

namespace hdu::hybrid {

/// Tensor of shape (n*D, C', H, W) with the (n, D) needed to invert it.
template <class T>
struct TripletBatch {
    Tensor<T> tensor;
    std::size_t cases = 0;
    std::size_t depth = 0;
};

/// Volume batch (n, C, H, W, D) to slice groups (n*D, 3C, H, W). Group g of
/// case b is batch row b*D + g; channel j*C + c holds slice clamp(g-1+j, 0, D-1)
/// of input channel c.
template <class T>
TripletBatch<T> slices_to_triplets(const Tensor<T>& volume) {
    const Shape& s = volume.shape();
    if (s.size() != 5) throw ShapeError("slices_to_triplets: expected (n,C,H,W,D), got " + to_string(s));
    const std::size_t n = s[0], C = s[1], H = s[2], W = s[3], D = s[4];
    if (D == 0) throw ShapeError("slices_to_triplets: empty depth");
    const std::size_t HW = H * W;
    auto source_slice = [D](std::size_t g, std::size_t j) {
        const std::ptrdiff_t z = std::ptrdiff_t(g) - 1 + std::ptrdiff_t(j);
        return std::size_t(std::clamp<std::ptrdiff_t>(z, 0, std::ptrdiff_t(D) - 1));
    };
    std::vector<T> out(n * D * 3 * C * HW);
    const T* v = volume.data().data();
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t g = 0; g < D; ++g)
            for (std::size_t j = 0; j < 3; ++j) {
                const std::size_t z = source_slice(g, j);
                for (std::size_t c = 0; c < C; ++c) {
                    T* dst = out.data() + (((b * D + g) * 3 + j) * C + c) * HW;
                    const T* src = v + (b * C + c) * HW * D + z;
                    for (std::size_t p = 0; p < HW; ++p) dst[p] = src[p * D];
                }
            }
    Tensor<T> t = hdu::detail::make_result<T>(
        "slices_to_triplets", Shape{n * D, 3 * C, H, W}, std::move(out), {volume},
        [n, C, HW, D, source_slice](Node<T>& self) {
            auto& g = self.inputs[0]->ensure_grad();
            for (std::size_t b = 0; b < n; ++b)
                for (std::size_t grp = 0; grp < D; ++grp)
                    for (std::size_t j = 0; j < 3; ++j) {
                        const std::size_t z = source_slice(grp, j);
                        for (std::size_t c = 0; c < C; ++c) {
                            const T* src = self.grad.data() + (((b * D + grp) * 3 + j) * C + c) * HW;
                            T* dst = g.data() + (b * C + c) * HW * D + z;
                            for (std::size_t p = 0; p < HW; ++p) dst[p * D] += src[p];
                        }
                    }
        });
    return {t, n, D};
}

/// Per-group maps (n*D, C, H, W) back to volumes (n, C, H, W, D); group g is
/// written to depth g of its case.
template <class T>
Tensor<T> triplets_to_volume(const Tensor<T>& maps, std::size_t cases, std::size_t depth) {
    const Shape& s = maps.shape();
    if (s.size() != 4) throw ShapeError("triplets_to_volume: expected (n*D,C,H,W), got " + to_string(s));
    if (cases == 0 || depth == 0 || s[0] != cases * depth)
        throw ShapeError("triplets_to_volume: batch " + std::to_string(s[0]) + " does not match provenance n=" +
                         std::to_string(cases) + ", D=" + std::to_string(depth));
    const std::size_t C = s[1], HW = s[2] * s[3], D = depth;
    std::vector<T> out(maps.size());
    const T* m = maps.data().data();
    for (std::size_t b = 0; b < cases; ++b)
        for (std::size_t g = 0; g < D; ++g)
            for (std::size_t c = 0; c < C; ++c) {
                const T* src = m + ((b * D + g) * C + c) * HW;
                T* dst = out.data() + (b * C + c) * HW * D + g;
                for (std::size_t p = 0; p < HW; ++p) dst[p * D] = src[p];
            }
    return hdu::detail::make_result<T>(
        "triplets_to_volume", Shape{cases, C, s[2], s[3], D}, std::move(out), {maps}, [cases, C, HW, D](Node<T>& self) {
            auto& g = self.inputs[0]->ensure_grad();
            for (std::size_t b = 0; b < cases; ++b)
                for (std::size_t grp = 0; grp < D; ++grp)
                    for (std::size_t c = 0; c < C; ++c) {
                        T* dst = g.data() + ((b * D + grp) * C + c) * HW;
                        const T* src = self.grad.data() + (b * C + c) * HW * D + grp;
                        for (std::size_t p = 0; p < HW; ++p) dst[p] += src[p * D];
                    }
        });
}

template <class T>
Tensor<T> triplets_to_volume(const Tensor<T>& maps, const TripletBatch<T>& provenance) {
    return triplets_to_volume(maps, provenance.cases, provenance.depth);
}

/// Input of the 3D network: the image volume followed by the 2D context probabilities.
template <class T>
Tensor<T> fuse_context_input(const Tensor<T>& image, const Tensor<T>& context) {
    const Shape &a = image.shape(), &b = context.shape();
    if (a.size() != 5 || b.size() != 5 || a[0] != b[0] || a[2] != b[2] || a[3] != b[3] || a[4] != b[4])
        throw ShapeError("fuse_context_input: " + to_string(a) + " and " + to_string(b) + " disagree on (n,H,W,D)");
    return concat_channels<T>({image, context});
}

/// Z = X3d + X2d'.
template <class T>
Tensor<T> hybrid_sum(const Tensor<T>& x3d, const Tensor<T>& x2d) {
    if (x3d.shape() != x2d.shape())
        throw ShapeError("hybrid_sum: " + to_string(x3d.shape()) + " vs " + to_string(x2d.shape()));
    return add(x3d, x2d);
}

/// Hybrid feature fusion: BN-ReLU-3x3x3 conv keeping the width, then a 1x1x1 classifier.
template <class T>
struct HffLayer {
    arch::BnRelu<T> norm;
    arch::Conv<T> conv;
    arch::Conv<T> classifier;

    static HffLayer make(arch::BuildContext<T>& ctx, std::size_t channels, std::size_t classes) {
        HffLayer h;
        h.norm = arch::BnRelu<T>::make(ctx, "hff.norm", channels);
        h.conv = arch::Conv<T>::make(ctx, "hff.conv", nn::ConvSpec::make(3, 3, 1, channels), channels, false);
        h.classifier = arch::Conv<T>::make(ctx, "hffcls.conv", nn::ConvSpec::make(3, 1, 1, classes), channels, true);
        return h;
    }

    struct Output {
        Tensor<T> features;  // H
        Tensor<T> logits;
        Tensor<T> probs;  // y_H
    };

    Output operator()(const Tensor<T>& z, nn::Mode mode) {
        Output o;
        o.features = conv(norm(z, mode));
        o.logits = classifier(o.features);
        o.probs = nn::softmax_channels(o.logits);
        return o;
    }
};

struct HybridConfig {
    arch::DenseUNetConfig net2d = arch::DenseUNetConfig::tiny_2d();
    arch::DenseUNetConfig net3d = arch::DenseUNetConfig::tiny_3d();
    arch::NormOptions norm;
    std::uint64_t seed = 1;

    void validate() const {
        net2d.validate();
        net3d.validate();
        if (net2d.dims != 2 || net3d.dims != 3) throw std::invalid_argument("HybridConfig: need a 2D and a 3D net");
        if (net2d.in_channels != 3) throw std::invalid_argument("HybridConfig: 2D net takes slice triplets (3 channels)");
        if (net3d.in_channels != 1 + net2d.num_classes)
            throw std::invalid_argument("HybridConfig: 3D net takes the volume plus 2D class probabilities");
        if (net2d.feature_channels() != net3d.feature_channels())
            throw std::invalid_argument("HybridConfig: 2D and 3D feature widths must match for the hybrid sum");
        if (net2d.num_classes != net3d.num_classes) throw std::invalid_argument("HybridConfig: class counts differ");
    }
};

/// lambda * L(y2d', y) + L(yH, y), both class-weighted cross-entropies on logits.
template <class T>
Tensor<T> joint_loss(const Tensor<T>& logits2d, const Tensor<T>& logits_h, const nn::LabelMap& labels,
                     const nn::LossWeights& weights, double lambda) {
    return add(mul(nn::softmax_cross_entropy(logits2d, labels, weights), T(lambda)),
               nn::softmax_cross_entropy(logits_h, labels, weights));
}

/// Parameter groups, as name prefixes in the model's ParameterSet.
inline constexpr const char* kTheta2d = "f2d.";
inline constexpr const char* kTheta2dCls = "f2dcls.";
inline constexpr const char* kTheta3d = "f3d.";
inline constexpr const char* kThetaHff = "hff.";
inline constexpr const char* kThetaHffCls = "hffcls.";

/// H-DenseUNet: 2D DenseUNet over slice triplets, 3D DenseUNet over the volume
/// plus 2D context, and the HFF layer over their summed features.
template <class T>
class HDenseUNet {
public:
    explicit HDenseUNet(const HybridConfig& cfg) : cfg_(cfg), rng_(cfg.seed) {
        cfg_.validate();
        seg2d_.emplace(cfg_.net2d, params_, kTheta2d, kTheta2dCls, rng_, cfg_.norm);
        net3d_.emplace(cfg_.net3d, params_, kTheta3d, rng_, cfg_.norm);
        arch::BuildContext<T> ctx{params_, rng_, cfg_.norm};
        hff_ = HffLayer<T>::make(ctx, cfg_.net3d.feature_channels(), cfg_.net3d.num_classes);
    }

    HDenseUNet(const HDenseUNet&) = delete;
    HDenseUNet& operator=(const HDenseUNet&) = delete;

    struct Output {
        Tensor<T> x2d;          // X2d'
        Tensor<T> logits2d;     // F^-1 of the 2D logits
        Tensor<T> probs2d;      // y2d'
        Tensor<T> x3d;          // X3d
        Tensor<T> z;            // X3d + X2d'
        Tensor<T> h;            // HFF features
        Tensor<T> logits_h;
        Tensor<T> probs_h;      // yH
    };

    /// 2D path only, on a triplet batch (B, 3, H, W): returns (features, logits).
    typename arch::DenseUNetSegmenter<T>::Output forward_2d(const Tensor<T>& triplets, nn::Mode mode) {
        return seg2d_->forward(triplets, mode);
    }

    /// Full hybrid forward on an image batch (n, 1, H, W, D).
    Output forward(const Tensor<T>& image, nn::Mode mode2d, nn::Mode mode3d) {
        Output o;
        auto trip = slices_to_triplets(image);
        auto out2d = seg2d_->forward(trip.tensor, mode2d);
        o.x2d = triplets_to_volume(out2d.features, trip);
        o.logits2d = triplets_to_volume(out2d.logits, trip);
        o.probs2d = triplets_to_volume(nn::softmax_channels(out2d.logits), trip);
        o.x3d = net3d_->forward(fuse_context_input(image, o.probs2d), mode3d);
        o.z = hybrid_sum(o.x3d, o.x2d);
        auto fused = hff_(o.z, mode3d);
        o.h = fused.features;
        o.logits_h = fused.logits;
        o.probs_h = fused.probs;
        return o;
    }

    /// 2D-only prediction laid out as a volume (n, C, H, W, D).
    Tensor<T> predict_2d_volume(const Tensor<T>& image) {
        auto trip = slices_to_triplets(image);
        auto out2d = seg2d_->forward(trip.tensor, nn::Mode::eval);
        return triplets_to_volume(nn::softmax_channels(out2d.logits), trip);
    }

    arch::ParameterSet<T>& params() { return params_; }
    const arch::ParameterSet<T>& params() const { return params_; }
    const HybridConfig& config() const { return cfg_; }
    arch::DenseUNetSegmenter<T>& seg2d() { return *seg2d_; }
    arch::DenseUNet<T>& net3d() { return *net3d_; }

private:
    HybridConfig cfg_;
    std::mt19937_64 rng_;
    arch::ParameterSet<T> params_;
    std::optional<arch::DenseUNetSegmenter<T>> seg2d_;
    std::optional<arch::DenseUNet<T>> net3d_;
    HffLayer<T> hff_;
};

}  // namespace hdu::hybrid
