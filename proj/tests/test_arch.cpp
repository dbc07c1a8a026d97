#include <gtest/gtest.h>

#include <filesystem>
#include <random>

#include "hdu/arch/denseunet.hpp"
#include "hdu/io/checkpoint.hpp"
#include "support.hpp"

using namespace hdu;
using namespace hdu::arch;

namespace {

using Ext = std::vector<std::size_t>;

ShapeTable table_2d_expected() {
    // Feature sizes of the 2D column; channels from k = 48 arithmetic.
    return {{"input", {224, 224}, 3},
            {"convolution 1", {112, 112}, 96},
            {"pooling", {56, 56}, 96},
            {"dense block 1", {56, 56}, 384},
            {"transition layer 1 conv", {56, 56}, 192},
            {"transition layer 1 pool", {28, 28}, 192},
            {"dense block 2", {28, 28}, 768},
            {"transition layer 2 conv", {28, 28}, 384},
            {"transition layer 2 pool", {14, 14}, 384},
            {"dense block 3", {14, 14}, 2112},
            {"transition layer 3 conv", {14, 14}, 1056},
            {"transition layer 3 pool", {7, 7}, 1056},
            {"dense block 4", {7, 7}, 2208},
            {"upsampling layer 1", {14, 14}, 768},
            {"upsampling layer 2", {28, 28}, 384},
            {"upsampling layer 3", {56, 56}, 96},
            {"upsampling layer 4", {112, 112}, 96},
            {"upsampling layer 5", {224, 224}, 64},
            {"convolution 2", {224, 224}, 3}};
}

}  // namespace

TEST(Config, CanonicalPresets) {
    auto c2 = DenseUNetConfig::canonical_2d();
    EXPECT_EQ(c2.growth_rate, 48u);
    EXPECT_EQ(c2.bottleneck_width, 4 * c2.growth_rate);
    EXPECT_EQ(c2.block_repeats, (std::array<std::size_t, 4>{6, 12, 36, 24}));
    EXPECT_EQ(c2.compression, 0.5);
    auto c3 = DenseUNetConfig::canonical_3d();
    EXPECT_EQ(c3.growth_rate, 32u);
    EXPECT_EQ(c3.bottleneck_width, 4 * c3.growth_rate);
    EXPECT_EQ(c3.block_repeats, (std::array<std::size_t, 4>{3, 4, 12, 8}));
    EXPECT_EQ(c3.upsample_channels, (std::array<std::size_t, 5>{504, 224, 192, 96, 64}));
}

TEST(Config, FieldRoundTrip) {
    auto c = DenseUNetConfig::tiny_3d();
    c.compression = 0.3;
    c.unet_connections_enabled = false;
    EXPECT_EQ(DenseUNetConfig::from_fields(c.to_fields()), c);
}

TEST(InferShapes, Canonical2DTable) { EXPECT_EQ(infer_shapes(DenseUNetConfig::canonical_2d(), {224, 224}), table_2d_expected()); }

TEST(InferShapes, Canonical3DDepthTrace) {
    auto rows = infer_shapes(DenseUNetConfig::canonical_3d(), {224, 224, 12});
    std::vector<std::size_t> z;
    for (auto& r : rows) z.push_back(r.extents[2]);
    EXPECT_EQ(z, (std::vector<std::size_t>{12, 6, 3, 3, 3, 3, 3, 3, 3, 3, 3, 3, 3, 3, 3, 3, 6, 12, 12}));
    EXPECT_EQ(rows[0].channels, 4u);
}

TEST(InferShapes, TinyHalvingTrace) {
    auto rows = infer_shapes(DenseUNetConfig::tiny_2d(), {32, 32});
    std::vector<std::size_t> x;
    for (auto& r : rows) x.push_back(r.extents[0]);
    EXPECT_EQ(x, (std::vector<std::size_t>{32, 16, 8, 8, 8, 4, 4, 4, 2, 2, 2, 1, 1, 2, 4, 8, 16, 32, 32}));
}

TEST(InferShapes, RejectsIndivisibleExtentNamingStage) {
    try {
        infer_shapes(DenseUNetConfig::tiny_2d(), {100, 100});
        FAIL();
    } catch (const std::invalid_argument& e) {
        EXPECT_NE(std::string(e.what()).find("transition layer 1 pool"), std::string::npos) << e.what();
    }
    EXPECT_THROW(infer_shapes(DenseUNetConfig::canonical_3d(), {224, 224, 10}), std::invalid_argument);
}

TEST(Build, MicroBlockEmitsGrowthRate) {
    std::mt19937_64 rng(1);
    struct Case {
        DenseUNetConfig cfg;
        std::size_t in;
    };
    for (auto [cfg, in] : {Case{DenseUNetConfig::canonical_2d(), 96}, Case{DenseUNetConfig::canonical_3d(), 96},
                           Case{DenseUNetConfig::tiny_2d(), 8}}) {
        ParameterSet<float> ps;
        BuildContext<float> ctx{ps, rng, {}};
        auto mb = MicroBlock<float>::make(ctx, "mb", in, cfg);
        Shape s{1, in, 3, 3};
        if (cfg.dims == 3) s.push_back(2);
        auto y = mb(Tensorf::zeros(s), nn::Mode::train);
        EXPECT_EQ(y.dim(1), cfg.growth_rate);
    }
}

TEST(Build, DenseBlockChannelAccumulation) {
    std::mt19937_64 rng(2);
    {
        ParameterSet<float> ps;
        BuildContext<float> ctx{ps, rng, {}};
        auto blk = DenseBlock<float>::make(ctx, "b", 96, 6, DenseUNetConfig::canonical_2d());
        EXPECT_EQ(blk.out_channels, 384u);
        EXPECT_EQ(blk(Tensorf::zeros({1, 96, 2, 2}), nn::Mode::train).dim(1), 384u);
    }
    {
        ParameterSet<float> ps;
        BuildContext<float> ctx{ps, rng, {}};
        auto blk = DenseBlock<float>::make(ctx, "b", 96, 3, DenseUNetConfig::canonical_3d());
        EXPECT_EQ(blk(Tensorf::zeros({1, 96, 2, 2, 2}), nn::Mode::train).dim(1), 192u);
    }
    {
        ParameterSet<float> ps;
        BuildContext<float> ctx{ps, rng, {}};
        auto blk = DenseBlock<float>::make(ctx, "b", 8, 1, DenseUNetConfig::tiny_2d());
        EXPECT_EQ(blk.layers.size(), 1u);
        EXPECT_EQ(blk(Tensorf::zeros({1, 8, 2, 2}), nn::Mode::train).dim(1), 12u);
    }
}

TEST(Build, TransitionCompressesAndPools) {
    std::mt19937_64 rng(3);
    ParameterSet<float> ps;
    BuildContext<float> ctx{ps, rng, {}};
    auto t2 = Transition<float>::make(ctx, "t2", 384, DenseUNetConfig::canonical_2d());
    EXPECT_EQ(t2.out_channels, 192u);
    auto c3 = DenseUNetConfig::tiny_3d();
    auto t3 = Transition<float>::make(ctx, "t3", 16, c3);
    EXPECT_EQ(t3(Tensorf::zeros({1, 16, 8, 8, 3}), nn::Mode::train).shape(), (Shape{1, 8, 4, 4, 3}));
    auto c1 = DenseUNetConfig::tiny_2d();
    c1.compression = 1.0;
    EXPECT_EQ(Transition<float>::make(ctx, "t1", 20, c1).out_channels, 20u);
}

TEST(Build, Canonical2DChannelTraceMatchesInference) {
    std::mt19937_64 rng(4);
    ParameterSet<float> ps;
    DenseUNet<float> net(DenseUNetConfig::canonical_2d(), ps, "f2d.", rng);
    EXPECT_EQ(net.channel_trace(),
              (std::vector<std::size_t>{96, 384, 192, 768, 384, 2112, 1056, 2208, 768, 384, 96, 96, 64}));
    const auto rows = infer_shapes(DenseUNetConfig::canonical_2d(), {224, 224});
    std::vector<std::size_t> inferred;
    for (auto& r : rows)
        if (r.stage != "input" && r.stage != "pooling" && r.stage.find(" pool") == std::string::npos &&
            r.stage != "convolution 2")
            inferred.push_back(r.channels);
    EXPECT_EQ(net.channel_trace(), inferred);
}

TEST(Build, Tiny2DForward) {
    std::mt19937_64 rng(5);
    ParameterSet<float> ps;
    DenseUNetSegmenter<float> seg(DenseUNetConfig::tiny_2d(), ps, "f2d.", "f2dcls.", rng);
    std::mt19937_64 data_rng(6);
    auto x = hdu::testing::random_tensor({2, 3, 32, 32}, data_rng, false);
    auto out = seg.forward(cast<float>(x), nn::Mode::train);
    EXPECT_EQ(out.features.shape(), (Shape{2, 16, 32, 32}));
    EXPECT_EQ(out.logits.shape(), (Shape{2, 3, 32, 32}));
    EXPECT_THROW(seg.forward(Tensorf::zeros({1, 3, 30, 30}), nn::Mode::train), std::invalid_argument);
    EXPECT_THROW(seg.forward(Tensorf::zeros({1, 2, 32, 32}), nn::Mode::train), ShapeError);
}

TEST(Build, Tiny3DForwardRestoresDepth) {
    std::mt19937_64 rng(7);
    ParameterSet<float> ps;
    DenseUNet<float> net(DenseUNetConfig::tiny_3d(), ps, "f3d.", rng);
    auto y = net.forward(Tensorf::zeros({1, 4, 32, 32, 8}), nn::Mode::train);
    EXPECT_EQ(y.shape(), (Shape{1, 16, 32, 32, 8}));
}

TEST(Build, WarmupModeChangesNoShapesAndSkipsProjections) {
    std::mt19937_64 rng(8);
    ParameterSet<double> ps;
    DenseUNetSegmenter<double> seg(DenseUNetConfig::tiny_2d(), ps, "f2d.", "f2dcls.", rng);
    std::mt19937_64 data_rng(9);
    auto x = hdu::testing::random_tensor({2, 3, 32, 32}, data_rng, false);
    auto with = seg.forward(x, nn::Mode::train);
    seg.net().set_unet_connections(false);
    auto without = seg.forward(x, nn::Mode::train);
    EXPECT_EQ(with.logits.shape(), without.logits.shape());
    backward(sum(without.logits));
    for (auto& name : ps.parameter_names("f2d.up1.skip")) {
        for (double g : ps.at(name).grad()) EXPECT_EQ(g, 0.0);
    }
    double stem_norm = 0;
    for (double g : ps.at("f2d.conv1.weight").grad()) stem_norm += g * g;
    EXPECT_GT(stem_norm, 0.0);
}

TEST(Build, ZeroInputGivesUniformSoftmax) {
    std::mt19937_64 rng(10);
    ParameterSet<double> ps;
    DenseUNetSegmenter<double> seg(DenseUNetConfig::tiny_2d(), ps, "f2d.", "f2dcls.", rng);
    for (auto mode : {nn::Mode::train, nn::Mode::eval}) {
        auto p = nn::softmax_channels(seg.forward(Tensord::zeros({1, 3, 32, 32}), mode).logits);
        for (double v : p.data()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-12);
    }
}

TEST(Checkpoint, RoundTripIsBitExact) {
    std::mt19937_64 rng(11);
    ParameterSet<float> ps;
    DenseUNetSegmenter<float> seg(DenseUNetConfig::tiny_2d(), ps, "f2d.", "f2dcls.", rng);
    io::Checkpoint c;
    for (auto& [k, v] : DenseUNetConfig::tiny_2d().to_fields()) c.header["model.2d." + k] = v;
    c.header["init"] = kInitScheme;
    io::append_parameters(c, ps);
    c.entries.push_back({"extra.f64", {2}, std::vector<double>{-0.0, 1e-300}});
    const auto path = std::filesystem::temp_directory_path() / "hdu_ckpt_roundtrip.bin";
    io::save(c, path);
    auto back = io::load(path);
    EXPECT_EQ(back, c);
    EXPECT_EQ(io::encode(back), io::encode(c));
    std::filesystem::remove(path);
}

TEST(Checkpoint, RejectsCorruptData) {
    io::Checkpoint c;
    c.entries.push_back({"w", {3}, std::vector<float>{1, 2, 3}});
    auto bytes = io::encode(c);
    EXPECT_THROW(io::decode(bytes.substr(0, bytes.size() - 2)), io::FormatError);
    EXPECT_THROW(io::decode("NOTACKPT" + bytes.substr(8)), io::FormatError);
}

TEST(Checkpoint, ImportHookInjectsExternalWeights) {
    std::mt19937_64 rng_a(12), rng_b(13);
    ParameterSet<float> a, b;
    DenseUNetSegmenter<float> sa(DenseUNetConfig::tiny_2d(), a, "f2d.", "f2dcls.", rng_a);
    DenseUNetSegmenter<float> sb(DenseUNetConfig::tiny_2d(), b, "f2d.", "f2dcls.", rng_b);
    io::Checkpoint c;
    io::append_parameters(c, a, "pretrained.");
    // Only the encoder stem is injected; the rest of b is untouched.
    auto external = io::entries_as<float>(c, "pretrained.");
    std::erase_if(external, [](auto& kv) { return kv.first.rfind("f2d.conv1", 0) != 0; });
    auto imported = b.import_values(external);
    EXPECT_FALSE(imported.empty());
    for (auto& name : imported) EXPECT_EQ(a.at(name).values(), b.at(name).values());
    EXPECT_NE(a.at("f2d.up1.conv.weight").values(), b.at("f2d.up1.conv.weight").values());
}
