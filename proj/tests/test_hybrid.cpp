#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "hdu/gradcheck.hpp"
#include "hdu/hybrid.hpp"
#include "support.hpp"

using namespace hdu;
using namespace hdu::hybrid;
namespace ht = hdu::testing;

namespace {

// (b, c, x, y, z) of an (n, C, H, W, D) volume.
double at5(const Tensord& t, std::size_t b, std::size_t c, std::size_t x, std::size_t y, std::size_t z) {
    const Shape& s = t.shape();
    return t.data()[(((b * s[1] + c) * s[2] + x) * s[3] + y) * s[4] + z];
}

double at4(const Tensord& t, std::size_t b, std::size_t c, std::size_t x, std::size_t y) {
    const Shape& s = t.shape();
    return t.data()[((b * s[1] + c) * s[2] + x) * s[3] + y];
}

std::size_t clamp_index(long z, std::size_t D) { return std::size_t(std::clamp<long>(z, 0, long(D) - 1)); }

nn::LabelMap random_labels(const Shape& s, std::mt19937_64& rng) {
    nn::LabelMap l{s, std::vector<std::uint8_t>(numel(s))};
    for (auto& v : l.values) v = std::uint8_t(ht::uniform_int(rng, 0, 2));
    return l;
}

}  // namespace

TEST(SliceTransform, LayoutAndClampRule) {
    std::mt19937_64 rng(3);
    const std::size_t n = 2, C = 2, H = 3, W = 2, D = 4;
    auto vol = ht::random_tensor({n, C, H, W, D}, rng, false);
    auto trip = slices_to_triplets(vol);
    ASSERT_EQ(trip.tensor.shape(), (Shape{n * D, 3 * C, H, W}));
    EXPECT_EQ(trip.cases, n);
    EXPECT_EQ(trip.depth, D);
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t g = 0; g < D; ++g)
            for (std::size_t j = 0; j < 3; ++j)
                for (std::size_t c = 0; c < C; ++c)
                    for (std::size_t x = 0; x < H; ++x)
                        for (std::size_t y = 0; y < W; ++y)
                            EXPECT_EQ(at4(trip.tensor, b * D + g, j * C + c, x, y),
                                      at5(vol, b, c, x, y, clamp_index(long(g) - 1 + long(j), D)));
}

TEST(SliceTransform, SingleSliceRepeatsItself) {
    std::mt19937_64 rng(4);
    auto vol = ht::random_tensor({1, 1, 4, 4, 1}, rng, false);
    auto trip = slices_to_triplets(vol);
    for (std::size_t j = 0; j < 3; ++j)
        for (std::size_t x = 0; x < 4; ++x)
            for (std::size_t y = 0; y < 4; ++y) EXPECT_EQ(at4(trip.tensor, 0, j, x, y), at5(vol, 0, 0, x, y, 0));
}

TEST(SliceTransform, CenterSliceRoundTrip) {
    std::mt19937_64 rng(5);
    for (std::size_t D : {1, 2, 5}) {
        auto vol = ht::random_tensor({2, 1, 3, 4, D}, rng, false);
        auto trip = slices_to_triplets(vol);
        // channel 1 of each group is the centre slice
        const Shape& ts = trip.tensor.shape();
        std::vector<double> centre;
        for (std::size_t r = 0; r < ts[0]; ++r)
            for (std::size_t x = 0; x < ts[2]; ++x)
                for (std::size_t y = 0; y < ts[3]; ++y) centre.push_back(at4(trip.tensor, r, 1, x, y));
        Tensord maps({ts[0], 1, ts[2], ts[3]}, centre, false);
        auto back = triplets_to_volume(maps, trip);
        EXPECT_EQ(back.shape(), vol.shape());
        EXPECT_EQ(back.values(), vol.values()) << "D=" << D;
    }
}

TEST(SliceTransform, InverseCommutesWithPerVoxelSoftmax) {
    std::mt19937_64 rng(6);
    auto maps = ht::random_tensor({6, 3, 4, 4}, rng, false, -4.0, 4.0);
    auto a = nn::softmax_channels(triplets_to_volume(maps, 2, 3));
    auto b = triplets_to_volume(nn::softmax_channels(maps), 2, 3);
    ASSERT_EQ(a.shape(), b.shape());
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a.data()[i], b.data()[i], 1e-15);
}

TEST(SliceTransform, ProvenanceMismatchIsRejected) {
    Tensord maps = Tensord::zeros({6, 2, 4, 4});
    EXPECT_THROW(triplets_to_volume(maps, 4, 2), ShapeError);
    EXPECT_THROW(triplets_to_volume(maps, 0, 6), ShapeError);
    EXPECT_THROW(slices_to_triplets(Tensord::zeros({1, 1, 4, 4})), ShapeError);
}

TEST(SliceTransform, GradientsMatchFiniteDifferences) {
    std::mt19937_64 rng(7);
    auto vol = ht::random_tensor({1, 2, 2, 3, 3}, rng);
    auto weights = ht::random_values(3 * 6 * 2 * 3, rng);
    ScalarFn f = [&](const std::vector<Tensord>& in) {
        auto trip = slices_to_triplets(in[0]);
        auto back = triplets_to_volume(trip.tensor, trip);
        return dot(mul(back, back), std::span<const double>(weights));
    };
    auto r = finite_diff_check(f, {vol});
    EXPECT_TRUE(r.ok(1e-6)) << r.max_rel_error;
}

TEST(Fusion, ContextInputAndHybridSumShapes) {
    auto img = Tensord::full({1, 1, 4, 4, 2}, 0.5);
    auto ctx = Tensord::full({1, 3, 4, 4, 2}, 0.25);
    auto in = fuse_context_input(img, ctx);
    EXPECT_EQ(in.shape(), (Shape{1, 4, 4, 4, 2}));
    EXPECT_EQ(at5(in, 0, 0, 1, 1, 1), 0.5);
    EXPECT_EQ(at5(in, 0, 3, 1, 1, 1), 0.25);
    EXPECT_THROW(fuse_context_input(img, Tensord::zeros({1, 3, 4, 4, 3})), ShapeError);
    auto z = hybrid_sum(img, img);
    EXPECT_EQ(z.data()[0], 1.0);
    EXPECT_THROW(hybrid_sum(img, ctx), ShapeError);
}

TEST(HDenseUNet, ConfigValidation) {
    HybridConfig cfg;
    EXPECT_NO_THROW(cfg.validate());
    cfg.net3d.upsample_channels[4] = 8;
    EXPECT_THROW(cfg.validate(), std::invalid_argument);
    cfg = HybridConfig{};
    cfg.net3d.in_channels = 1;
    EXPECT_THROW(cfg.validate(), std::invalid_argument);
}

TEST(HDenseUNet, ParameterGroupsAndForwardShapes) {
    HDenseUNet<double> model(HybridConfig{});
    auto& p = model.params();
    for (auto prefix : {kTheta2d, kTheta2dCls, kTheta3d, kThetaHff, kThetaHffCls})
        EXPECT_FALSE(p.parameter_names(prefix).empty()) << prefix;
    EXPECT_EQ(p.parameter_names().size(),
              p.parameter_names(kTheta2d).size() + p.parameter_names(kTheta2dCls).size() +
                  p.parameter_names(kTheta3d).size() + p.parameter_names(kThetaHff).size() +
                  p.parameter_names(kThetaHffCls).size());

    std::mt19937_64 rng(8);
    auto img = ht::random_tensor({1, 1, 32, 32, 4}, rng, false);
    auto out = model.forward(img, nn::Mode::train, nn::Mode::train);
    const std::size_t F = model.config().net3d.feature_channels();
    EXPECT_EQ(out.x2d.shape(), (Shape{1, F, 32, 32, 4}));
    EXPECT_EQ(out.x3d.shape(), (Shape{1, F, 32, 32, 4}));
    EXPECT_EQ(out.z.shape(), out.x3d.shape());
    EXPECT_EQ(out.h.shape(), out.x3d.shape());
    EXPECT_EQ(out.probs2d.shape(), (Shape{1, 3, 32, 32, 4}));
    EXPECT_EQ(out.probs_h.shape(), (Shape{1, 3, 32, 32, 4}));
    for (std::size_t v = 0; v < 32 * 32 * 4; ++v) {
        double s = 0;
        for (std::size_t c = 0; c < 3; ++c) s += out.probs_h.data()[c * 32 * 32 * 4 + v];
        ASSERT_NEAR(s, 1.0, 1e-12);
    }
    for (std::size_t i = 0; i < out.z.size(); ++i)
        ASSERT_NEAR(out.z.data()[i], out.x3d.data()[i] + out.x2d.data()[i], 1e-12);
}

TEST(HDenseUNet, JointLossReachesEveryParameter) {
    // batch 2: the 3D bottleneck is a single voxel, and train-mode BN needs two samples
    HDenseUNet<double> model(HybridConfig{});
    std::mt19937_64 rng(9);
    auto img = ht::random_tensor({2, 1, 32, 32, 4}, rng, false);
    auto labels = random_labels({2, 32, 32, 4}, rng);
    auto out = model.forward(img, nn::Mode::train, nn::Mode::train);
    auto loss = joint_loss(out.logits2d, out.logits_h, labels, nn::LossWeights{}, 0.5);
    backward(loss);
    for (auto& name : model.params().parameter_names()) {
        double norm = 0;
        for (double g : model.params().at(name).grad()) norm += g * g;
        EXPECT_GT(norm, 0.0) << name;
    }
}

TEST(HDenseUNet, JointLossValue) {
    HDenseUNet<double> model(HybridConfig{});
    std::mt19937_64 rng(10);
    auto img = ht::random_tensor({1, 1, 32, 32, 4}, rng, false);
    auto labels = random_labels({1, 32, 32, 4}, rng);
    auto out = model.forward(img, nn::Mode::train, nn::Mode::train);
    const nn::LossWeights w;
    const double l2d = nn::softmax_cross_entropy(out.logits2d, labels, w).item();
    const double lh = nn::softmax_cross_entropy(out.logits_h, labels, w).item();
    EXPECT_NEAR(joint_loss(out.logits2d, out.logits_h, labels, w, 0.5).item(), 0.5 * l2d + lh, 1e-12);
}

TEST(HDenseUNet, FrozenTwoDimensionalPartGetsNoGradient) {
    HDenseUNet<double> model(HybridConfig{});
    model.params().set_frozen(kTheta2d, true);
    model.params().set_frozen(kTheta2dCls, true);
    std::mt19937_64 rng(11);
    auto img = ht::random_tensor({2, 1, 32, 32, 4}, rng, false);
    auto labels = random_labels({2, 32, 32, 4}, rng);
    auto before = model.params().at("f2d.conv1.norm.running_mean").values();
    auto out = model.forward(img, nn::Mode::eval, nn::Mode::train);
    backward(nn::softmax_cross_entropy(out.logits_h, labels, nn::LossWeights{}));
    EXPECT_EQ(model.params().at("f2d.conv1.norm.running_mean").values(), before);
    for (auto& name : model.params().parameter_names()) {
        double norm = 0;
        for (double g : model.params().at(name).grad()) norm += g * g;
        const bool two_d = name.rfind(kTheta2d, 0) == 0 || name.rfind(kTheta2dCls, 0) == 0;
        if (two_d)
            EXPECT_EQ(norm, 0.0) << name;
        else
            EXPECT_GT(norm, 0.0) << name;
    }
}

TEST(HDenseUNet, SameSeedSameOutput) {
    std::mt19937_64 rng(12);
    auto img = ht::random_tensor({1, 1, 32, 32, 4}, rng, false);
    HDenseUNet<double> a(HybridConfig{}), b(HybridConfig{});
    EXPECT_EQ(a.forward(img, nn::Mode::eval, nn::Mode::eval).probs_h.values(),
              b.forward(img, nn::Mode::eval, nn::Mode::eval).probs_h.values());
}
