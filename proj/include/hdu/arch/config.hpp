#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "hdu/nn/geometry.hpp"

namespace hdu::arch {

/// Declarative description of a DenseUNet (2D or 3D).
struct DenseUNetConfig {
    int dims = 2;
    std::size_t in_channels = 3;
    std::size_t growth_rate = 48;
    std::size_t bottleneck_width = 192;
    std::array<std::size_t, 4> block_repeats{6, 12, 36, 24};
    double compression = 0.5;
    std::size_t stem_channels = 96;
    std::array<std::size_t, 5> upsample_channels{768, 384, 96, 96, 64};
    std::size_t num_classes = 3;
    bool unet_connections_enabled = true;

    /// 2D DenseUNet-167, k = 48.
    static DenseUNetConfig canonical_2d() { return {}; }

    /// 3D DenseUNet-65, k = 32; input is the volume plus 3 context probabilities.
    static DenseUNetConfig canonical_3d() {
        DenseUNetConfig c;
        c.dims = 3;
        c.in_channels = 4;
        c.growth_rate = 32;
        c.bottleneck_width = 128;
        c.block_repeats = {3, 4, 12, 8};
        c.upsample_channels = {504, 224, 192, 96, 64};
        return c;
    }

    /// Desk-scale 2D variant used for training on phantoms.
    static DenseUNetConfig tiny_2d() {
        DenseUNetConfig c;
        c.growth_rate = 4;
        c.bottleneck_width = 16;
        c.block_repeats = {2, 2, 2, 2};
        c.stem_channels = 8;
        c.upsample_channels = {32, 16, 16, 16, 16};
        return c;
    }

    static DenseUNetConfig tiny_3d() {
        DenseUNetConfig c = tiny_2d();
        c.dims = 3;
        c.in_channels = 4;
        return c;
    }

    std::size_t feature_channels() const { return upsample_channels.back(); }

    void validate() const {
        auto fail = [](const std::string& m) { throw std::invalid_argument("DenseUNetConfig: " + m); };
        if (dims != 2 && dims != 3) fail("dims must be 2 or 3");
        if (in_channels == 0) fail("in_channels must be positive");
        if (growth_rate == 0) fail("growth rate must be positive");
        if (bottleneck_width == 0) fail("bottleneck width must be positive");
        for (auto d : block_repeats)
            if (d == 0) fail("block repeats must be >= 1");
        if (!(compression > 0.0 && compression <= 1.0)) fail("compression must lie in (0, 1]");
        if (stem_channels == 0) fail("stem channels must be positive");
        for (auto u : upsample_channels)
            if (u == 0) fail("upsample channels must be positive");
        if (num_classes < 2) fail("need at least two classes");
    }

    std::map<std::string, std::string> to_fields() const {
        auto join = [](const auto& a) {
            std::ostringstream os;
            for (std::size_t i = 0; i < a.size(); ++i) os << (i ? "," : "") << a[i];
            return os.str();
        };
        std::ostringstream comp;
        comp.precision(17);
        comp << compression;
        return {{"dims", std::to_string(dims)},
                {"in_channels", std::to_string(in_channels)},
                {"growth_rate", std::to_string(growth_rate)},
                {"bottleneck_width", std::to_string(bottleneck_width)},
                {"block_repeats", join(block_repeats)},
                {"compression", comp.str()},
                {"stem_channels", std::to_string(stem_channels)},
                {"upsample_channels", join(upsample_channels)},
                {"num_classes", std::to_string(num_classes)},
                {"unet_connections_enabled", unet_connections_enabled ? "true" : "false"}};
    }

    static DenseUNetConfig from_fields(const std::map<std::string, std::string>& f) {
        auto get = [&](const std::string& k) -> const std::string& {
            auto it = f.find(k);
            if (it == f.end()) throw std::invalid_argument("DenseUNetConfig: missing field " + k);
            return it->second;
        };
        auto list = [&](const std::string& k, auto& arr) {
            std::istringstream is(get(k));
            std::string tok;
            std::size_t i = 0;
            while (std::getline(is, tok, ',')) {
                if (i >= arr.size()) throw std::invalid_argument("DenseUNetConfig: too many values for " + k);
                arr[i++] = std::stoul(tok);
            }
            if (i != arr.size()) throw std::invalid_argument("DenseUNetConfig: too few values for " + k);
        };
        DenseUNetConfig c;
        c.dims = std::stoi(get("dims"));
        c.in_channels = std::stoul(get("in_channels"));
        c.growth_rate = std::stoul(get("growth_rate"));
        c.bottleneck_width = std::stoul(get("bottleneck_width"));
        list("block_repeats", c.block_repeats);
        c.compression = std::stod(get("compression"));
        c.stem_channels = std::stoul(get("stem_channels"));
        list("upsample_channels", c.upsample_channels);
        c.num_classes = std::stoul(get("num_classes"));
        c.unet_connections_enabled = get("unet_connections_enabled") == "true";
        c.validate();
        return c;
    }

    bool operator==(const DenseUNetConfig&) const = default;
};

/// Windows and upsampling factors of the stride chain.
struct StrideChain {
    nn::Window stem;
    nn::Window stem_pool;
    nn::Window transition_pool;
    std::array<nn::Extents3, 5> upsample;

    static StrideChain for_dims(int dims) {
        StrideChain s;
        s.stem = nn::Window::cube(dims, 7, 2);
        s.stem_pool = nn::Window::cube(dims, 3, 2);
        if (dims == 2) {
            s.transition_pool = nn::Window::cube(2, 2, 2);
            s.upsample = {nn::Extents3{2, 2, 1}, {2, 2, 1}, {2, 2, 1}, {2, 2, 1}, {2, 2, 1}};
        } else {
            // in-plane only until the two last stages restore z
            s.transition_pool = nn::Window::make(3, {2, 2, 1}, {2, 2, 1});
            s.upsample = {nn::Extents3{2, 2, 1}, {2, 2, 1}, {2, 2, 1}, {2, 2, 2}, {2, 2, 2}};
        }
        return s;
    }
};

inline std::size_t compressed(std::size_t channels, double compression) {
    return static_cast<std::size_t>(std::floor(double(channels) * compression));
}

/// One row of the architecture table: stage name, spatial extents, channels.
struct ShapeRow {
    std::string stage;
    std::vector<std::size_t> extents;
    std::size_t channels = 0;

    bool operator==(const ShapeRow&) const = default;
};

using ShapeTable = std::vector<ShapeRow>;

/// Symbolic shape propagation; allocates no parameters.
/// Throws std::invalid_argument naming the first stage whose stride does not
/// divide the incoming extents.
inline ShapeTable infer_shapes(const DenseUNetConfig& cfg, const std::vector<std::size_t>& input_extents) {
    cfg.validate();
    if (input_extents.size() != std::size_t(cfg.dims))
        throw std::invalid_argument("infer_shapes: input has " + std::to_string(input_extents.size()) +
                                    " axes, config expects " + std::to_string(cfg.dims));
    const StrideChain chain = StrideChain::for_dims(cfg.dims);
    ShapeTable rows;
    std::vector<std::size_t> ext = input_extents;
    auto emit = [&](const std::string& name, std::size_t ch) { rows.push_back({name, ext, ch}); };
    auto downsample = [&](const std::string& name, const nn::Window& w) {
        for (int a = 0; a < cfg.dims; ++a) {
            if (ext[a] == 0 || ext[a] % w.stride[a] != 0)
                throw std::invalid_argument("infer_shapes: stage '" + name + "' cannot stride axis " +
                                            std::to_string(a) + " of extent " + std::to_string(ext[a]) + " by " +
                                            std::to_string(w.stride[a]));
            ext[a] /= w.stride[a];
        }
    };

    emit("input", cfg.in_channels);
    downsample("convolution 1", chain.stem);
    emit("convolution 1", cfg.stem_channels);
    downsample("pooling", chain.stem_pool);
    emit("pooling", cfg.stem_channels);
    std::size_t ch = cfg.stem_channels;
    for (int b = 0; b < 4; ++b) {
        ch += cfg.block_repeats[b] * cfg.growth_rate;
        emit("dense block " + std::to_string(b + 1), ch);
        if (b == 3) break;
        const std::string t = "transition layer " + std::to_string(b + 1);
        ch = compressed(ch, cfg.compression);
        if (ch == 0) throw std::invalid_argument("infer_shapes: stage '" + t + "' compresses to zero channels");
        emit(t + " conv", ch);
        downsample(t + " pool", chain.transition_pool);
        emit(t + " pool", ch);
    }
    for (int u = 0; u < 5; ++u) {
        for (int a = 0; a < cfg.dims; ++a) ext[a] *= chain.upsample[u][a];
        emit("upsampling layer " + std::to_string(u + 1), cfg.upsample_channels[u]);
    }
    emit("convolution 2", cfg.num_classes);
    if (ext != input_extents)
        throw std::invalid_argument("infer_shapes: decoder does not restore the input extents");
    return rows;
}

}  // namespace hdu::arch
