#pragma once

// In-plane mirror and zoom about the slice centre. The output keeps the input
// grid; samples falling outside it take the nearest edge value.

#include <algorithm>
#include <cmath>
#include <random>
#include <stdexcept>
#include <utility>

#include "hdu/io/volume.hpp"
#include "hdu/train/schedule.hpp"

namespace hdu::train {

struct AugmentParams {
    double scale = 1.0;
    bool mirror_x = false;
    bool mirror_y = false;

    bool identity() const { return scale == 1.0 && !mirror_x && !mirror_y; }
};

/// Always consumes the same number of draws so the stream stays aligned
/// whichever toggles are set.
inline AugmentParams draw_augment(std::mt19937_64& rng, const TrainConfig& cfg) {
    std::uniform_real_distribution<double> scale(cfg.scale_min, cfg.scale_max);
    std::bernoulli_distribution coin(0.5);
    AugmentParams p;
    const double s = scale(rng);
    const bool mx = coin(rng), my = coin(rng);
    if (cfg.augment_scale) p.scale = s;
    if (cfg.augment_mirror) {
        p.mirror_x = mx;
        p.mirror_y = my;
    }
    return p;
}

/// Applies the same transform to an image (bilinear) and its labels (nearest).
inline std::pair<io::Volume, io::Volume> augment(const io::Volume& image, const io::Volume& labels,
                                                 const AugmentParams& p) {
    if (image.extents != labels.extents) throw std::invalid_argument("augment: image and labels differ in extents");
    if (!(p.scale > 0.0)) throw std::invalid_argument("augment: scale must be positive");
    if (p.identity()) return {image, labels};
    const auto [W, H, D] = image.extents;
    const double cx = (double(W) - 1.0) / 2.0, cy = (double(H) - 1.0) / 2.0;

    struct Tap {
        std::size_t i0, i1, nearest;
        double f;
    };
    auto taps = [&](std::size_t n, double c, bool mirror) {
        std::vector<Tap> out(n);
        for (std::size_t o = 0; o < n; ++o) {
            const double m = mirror ? double(n - 1 - o) : double(o);
            const double u = std::clamp(c + (m - c) / p.scale, 0.0, double(n - 1));
            const auto i0 = std::size_t(std::floor(u));
            const std::size_t i1 = std::min(i0 + 1, n - 1);
            out[o] = {i0, i1, std::size_t(std::lround(u)), u - double(i0)};
        }
        return out;
    };
    const auto tx = taps(W, cx, p.mirror_x), ty = taps(H, cy, p.mirror_y);

    io::Volume img = image, lab = labels;
    for (std::size_t z = 0; z < D; ++z)
        for (std::size_t y = 0; y < H; ++y) {
            const Tap& b = ty[y];
            for (std::size_t x = 0; x < W; ++x) {
                const Tap& a = tx[x];
                const double top = (1.0 - a.f) * image.at(a.i0, b.i0, z) + a.f * image.at(a.i1, b.i0, z);
                const double bot = (1.0 - a.f) * image.at(a.i0, b.i1, z) + a.f * image.at(a.i1, b.i1, z);
                img.at(x, y, z) = float((1.0 - b.f) * top + b.f * bot);
                lab.at(x, y, z) = labels.at(a.nearest, b.nearest, z);
            }
        }
    return {std::move(img), std::move(lab)};
}

inline std::pair<io::Volume, io::Volume> augment(const io::Volume& image, const io::Volume& labels,
                                                 std::uint64_t seed, const TrainConfig& cfg = {}) {
    std::mt19937_64 rng(seed);
    return augment(image, labels, draw_augment(rng, cfg));
}

}  // namespace hdu::train
