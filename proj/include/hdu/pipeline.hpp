#pragma once

// Cascaded inference: coarse liver localization at reduced resolution, ROI
// crop, H-DenseUNet prediction inside the ROI, thresholding, and
// post-processing (largest liver component, lesions outside the liver removed).

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <deque>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "hdu/data/phantom.hpp"
#include "hdu/data/preprocess.hpp"
#include "hdu/hybrid.hpp"
#include "hdu/metrics.hpp"
#include "hdu/train/models.hpp"

namespace hdu::pipeline {

using io::Extents;
using io::Volume;
using metrics::Mask;

/// Inclusive voxel bounds per axis.
struct RoiBox {
    std::array<std::size_t, 3> lo{0, 0, 0};
    std::array<std::size_t, 3> hi{0, 0, 0};
    std::size_t margin = 0;

    Extents extents() const { return {hi[0] - lo[0] + 1, hi[1] - lo[1] + 1, hi[2] - lo[2] + 1}; }

    static RoiBox whole(const Extents& e) { return {{0, 0, 0}, {e[0] - 1, e[1] - 1, e[2] - 1}, 0}; }

    bool operator==(const RoiBox&) const = default;
};

/// Bounding box of `mask` grown by `margin` voxels per side, clamped to the grid.
inline RoiBox roi_box(const Mask& mask, std::size_t margin) {
    const auto [X, Y, Z] = mask.extents;
    std::array<std::size_t, 3> lo{X, Y, Z}, hi{0, 0, 0};
    bool any = false;
    for (std::size_t z = 0; z < Z; ++z)
        for (std::size_t y = 0; y < Y; ++y)
            for (std::size_t x = 0; x < X; ++x) {
                if (!mask.v[mask.index(x, y, z)]) continue;
                any = true;
                const std::array<std::size_t, 3> p{x, y, z};
                for (int a = 0; a < 3; ++a) {
                    lo[a] = std::min(lo[a], p[a]);
                    hi[a] = std::max(hi[a], p[a]);
                }
            }
    if (!any) throw std::invalid_argument("roi_box: empty mask");
    RoiBox b;
    b.margin = margin;
    for (int a = 0; a < 3; ++a) {
        b.lo[a] = lo[a] > margin ? lo[a] - margin : 0;
        b.hi[a] = std::min(hi[a] + margin, mask.extents[a] - 1);
    }
    return b;
}

inline Volume crop(const Volume& v, const RoiBox& b) {
    for (int a = 0; a < 3; ++a)
        if (b.lo[a] > b.hi[a] || b.hi[a] >= v.extents[a]) throw std::invalid_argument("crop: box outside the volume");
    Volume out = Volume::make(b.extents(), v.spacing, v.dtype);
    for (int a = 0; a < 3; ++a) out.origin[a] = v.origin[a] + double(b.lo[a]) * v.spacing[a];
    const auto [X, Y, Z] = out.extents;
    for (std::size_t z = 0; z < Z; ++z)
        for (std::size_t y = 0; y < Y; ++y)
            for (std::size_t x = 0; x < X; ++x) out.at(x, y, z) = v.at(x + b.lo[0], y + b.lo[1], z + b.lo[2]);
    return out;
}

/// Places `sub` at `b` inside a volume shaped like `like`, filling the rest with `fill`.
inline Volume paste(const Volume& sub, const RoiBox& b, const Volume& like, float fill = 0.0f) {
    if (sub.extents != b.extents()) throw std::invalid_argument("paste: sub-volume does not match the box");
    Volume out = Volume::make(like.extents, like.spacing, sub.dtype, fill);
    out.origin = like.origin;
    const auto [X, Y, Z] = sub.extents;
    for (std::size_t z = 0; z < Z; ++z)
        for (std::size_t y = 0; y < Y; ++y)
            for (std::size_t x = 0; x < X; ++x) out.at(x + b.lo[0], y + b.lo[1], z + b.lo[2]) = sub.at(x, y, z);
    return out;
}

/// Grows `v` to extents that are multiples of `m` by repeating edge voxels.
inline Volume pad_to_multiple(const Volume& v, const Extents& m) {
    Extents e;
    for (int a = 0; a < 3; ++a) e[a] = (v.extents[a] + m[a] - 1) / m[a] * m[a];
    if (e == v.extents) return v;
    Volume out = Volume::make(e, v.spacing, v.dtype);
    out.origin = v.origin;
    for (std::size_t z = 0; z < e[2]; ++z)
        for (std::size_t y = 0; y < e[1]; ++y)
            for (std::size_t x = 0; x < e[0]; ++x)
                out.at(x, y, z) = v.at(std::min(x, v.extents[0] - 1), std::min(y, v.extents[1] - 1),
                                       std::min(z, v.extents[2] - 1));
    return out;
}

/// Per-voxel class probabilities; values[c * N + i] with i the x-fastest voxel index.
struct ProbMap {
    Extents extents{0, 0, 0};
    std::size_t classes = 0;
    std::vector<float> values;

    std::size_t voxels() const { return extents[0] * extents[1] * extents[2]; }
    float at(std::size_t c, std::size_t i) const { return values[c * voxels() + i]; }
};

/// Case `n` of an (N, C, X, Y, Z) tensor, cropped to the leading `e` voxels of each axis.
inline ProbMap prob_map(const Tensor<float>& t, std::size_t n, const Extents& e) {
    const Shape& s = t.shape();
    if (s.size() != 5 || s[2] < e[0] || s[3] < e[1] || s[4] < e[2]) throw ShapeError("prob_map: bad tensor " + to_string(s));
    ProbMap p{e, s[1], std::vector<float>(s[1] * e[0] * e[1] * e[2])};
    const float* src = t.data().data() + n * s[1] * s[2] * s[3] * s[4];
    const std::size_t N = p.voxels();
    for (std::size_t c = 0; c < s[1]; ++c)
        for (std::size_t z = 0; z < e[2]; ++z)
            for (std::size_t y = 0; y < e[1]; ++y)
                for (std::size_t x = 0; x < e[0]; ++x)
                    p.values[c * N + x + e[0] * (y + e[1] * z)] = src[((c * s[2] + x) * s[3] + y) * s[4] + z];
    return p;
}

// ---------------------------------------------------------------- coarse stage

struct CoarseResult {
    Mask coarse;  // at the coarse resolution
    Mask mask;    // upsampled (nearest) onto the input grid
    bool empty = false;
};

/// Nearest-neighbour transfer of a coarse mask onto a grid with `extents` and `spacing`.
inline Mask upsample_mask(const Mask& m, const io::Vec3& coarse_spacing, const Extents& extents, const io::Vec3& spacing) {
    std::array<std::vector<std::size_t>, 3> map;
    for (int a = 0; a < 3; ++a) {
        map[a].resize(extents[a]);
        for (std::size_t i = 0; i < extents[a]; ++i) {
            const double u = double(i) * spacing[a] / coarse_spacing[a];
            map[a][i] = std::min(std::size_t(std::llround(u)), m.extents[a] - 1);
        }
    }
    Mask out = Mask::empty(extents);
    for (std::size_t z = 0; z < extents[2]; ++z)
        for (std::size_t y = 0; y < extents[1]; ++y)
            for (std::size_t x = 0; x < extents[0]; ++x)
                out.v[out.index(x, y, z)] = m.v[m.index(map[0][x], map[1][y], map[2][z])];
    return out;
}

/// Liver localization with the coarse model on a preprocessed volume already
/// at the coarse spacing. Returns the binary mask at that resolution.
template <class T>
Mask coarse_liver(train::CoarseModel<T>& model, const Volume& coarse_image) {
    NoGradGuard no_grad;
    const Volume padded = pad_to_multiple(coarse_image, {32, 32, 1});
    auto trip = hybrid::slices_to_triplets(data::to_tensor<T>(padded));
    auto logits = model.seg().forward(trip.tensor, nn::Mode::eval).logits;
    auto probs = hybrid::triplets_to_volume(nn::softmax_channels(logits), trip);
    const ProbMap p = prob_map(probs, 0, coarse_image.extents);
    Mask m = Mask::empty(coarse_image.extents);
    for (std::size_t i = 0; i < p.voxels(); ++i) m.v[i] = p.at(1, i) >= 0.5f ? 1 : 0;
    return m;
}

/// Resamples a preprocessed volume to the coarse spacing, localizes the liver
/// and maps the mask back onto the input grid.
template <class T>
CoarseResult localize(train::CoarseModel<T>& model, const Volume& image, double coarse_factor = 2.0) {
    const io::Vec3 cs = data::coarse_spacing(image.spacing, coarse_factor);
    const Volume small = data::resample(image, cs, data::Interp::trilinear);
    CoarseResult r;
    r.coarse = coarse_liver(model, small);
    r.mask = upsample_mask(r.coarse, small.spacing, image.extents, image.spacing);
    r.empty = r.mask.count() == 0;
    return r;
}

// ------------------------------------------------------------------ fine stage

struct FineOptions {
    std::size_t tile_depth = 0;   // slices per tile along z; 0 evaluates the whole volume at once
    std::size_t tile_margin = 0;  // context slices added on each side of a tile
};

inline constexpr Extents kFineMultiple{32, 32, 4};

namespace detail {

template <class T>
ProbMap predict_whole(hybrid::HDenseUNet<T>& model, const Volume& v) {
    const Volume padded = pad_to_multiple(v, kFineMultiple);
    auto out = model.forward(data::to_tensor<T>(padded), nn::Mode::eval, nn::Mode::eval);
    return prob_map(out.probs_h, 0, v.extents);
}

}  // namespace detail

/// H-DenseUNet class probabilities for a preprocessed sub-volume. Inputs are
/// padded to the stride multiples and the padding removed afterwards. With
/// tiling, each tile of `tile_depth` slices is evaluated with `tile_margin`
/// context slices per side; tile starts stay aligned to the z stride.
/// Aligned-corner upsampling makes tiled output approximate: it matches the
/// whole-volume result only when every tile's context covers the volume.
template <class T>
ProbMap fine_predict(hybrid::HDenseUNet<T>& model, const Volume& v, const FineOptions& opt = {}) {
    NoGradGuard no_grad;
    const std::size_t D = v.extents[2];
    if (opt.tile_depth == 0 || opt.tile_depth >= D) return detail::predict_whole(model, v);
    const std::size_t step = kFineMultiple[2];
    if (opt.tile_depth % step != 0 || opt.tile_margin % step != 0)
        throw std::invalid_argument("fine_predict: tile depth and margin must be multiples of " + std::to_string(step));
    ProbMap out{v.extents, 0, {}};
    const std::size_t N = out.voxels(), plane = v.extents[0] * v.extents[1];
    for (std::size_t z0 = 0; z0 < D; z0 += opt.tile_depth) {
        const std::size_t z1 = std::min(z0 + opt.tile_depth, D);
        const std::size_t c0 = z0 > opt.tile_margin ? z0 - opt.tile_margin : 0;
        const std::size_t c1 = std::min(z1 + opt.tile_margin, D);
        RoiBox box{{0, 0, c0}, {v.extents[0] - 1, v.extents[1] - 1, c1 - 1}, 0};
        const ProbMap tile = detail::predict_whole(model, crop(v, box));
        if (out.classes == 0) {
            out.classes = tile.classes;
            out.values.assign(out.classes * N, 0.0f);
        }
        const std::size_t tn = tile.voxels();
        for (std::size_t c = 0; c < out.classes; ++c)
            for (std::size_t z = z0; z < z1; ++z)
                std::copy_n(tile.values.begin() + std::ptrdiff_t(c * tn + (z - c0) * plane), plane,
                            out.values.begin() + std::ptrdiff_t(c * N + z * plane));
    }
    return out;
}

// -------------------------------------------------------------- decisions

/// Tumor where p_tumor >= tau_tumor, else liver where p_liver + p_tumor >= tau_liver, else background.
inline Volume decide_labels(const ProbMap& p, const io::Vec3& spacing, double tau_liver = 0.5, double tau_tumor = 0.5) {
    if (p.classes != 3) throw std::invalid_argument("decide_labels: expected 3 classes, got " + std::to_string(p.classes));
    Volume out = Volume::make(p.extents, spacing, io::DType::uint8);
    for (std::size_t i = 0; i < p.voxels(); ++i) {
        const double pl = p.at(1, i), pt = p.at(2, i);
        out.values[i] = pt >= tau_tumor ? 2.0f : (pl + pt >= tau_liver ? 1.0f : 0.0f);
    }
    return out;
}

/// Keeps the largest 26-connected component; among equally large ones, the
/// one containing the earliest voxel in raster (z, y, x) order.
inline Mask largest_component(const Mask& m) {
    const auto [X, Y, Z] = m.extents;
    std::vector<std::int32_t> label(m.v.size(), -1);
    std::vector<std::size_t> sizes;
    std::vector<std::size_t> queue;
    for (std::size_t seed = 0; seed < m.v.size(); ++seed) {
        if (!m.v[seed] || label[seed] >= 0) continue;
        const auto id = std::int32_t(sizes.size());
        std::size_t count = 0;
        queue.assign(1, seed);
        label[seed] = id;
        while (!queue.empty()) {
            const std::size_t i = queue.back();
            queue.pop_back();
            ++count;
            const std::size_t x = i % X, y = (i / X) % Y, z = i / (X * Y);
            for (int dz = -1; dz <= 1; ++dz) {
                if ((dz < 0 && z == 0) || (dz > 0 && z + 1 == Z)) continue;
                for (int dy = -1; dy <= 1; ++dy) {
                    if ((dy < 0 && y == 0) || (dy > 0 && y + 1 == Y)) continue;
                    for (int dx = -1; dx <= 1; ++dx) {
                        if ((dx < 0 && x == 0) || (dx > 0 && x + 1 == X)) continue;
                        const std::size_t j = m.index(x + dx, y + dy, z + dz);
                        if (m.v[j] && label[j] < 0) {
                            label[j] = id;
                            queue.push_back(j);
                        }
                    }
                }
            }
        }
        sizes.push_back(count);
    }
    Mask out = Mask::empty(m.extents);
    if (sizes.empty()) return out;
    const auto best = std::int32_t(std::max_element(sizes.begin(), sizes.end()) - sizes.begin());
    for (std::size_t i = 0; i < m.v.size(); ++i) out.v[i] = label[i] == best ? 1 : 0;
    return out;
}

/// Background cavities (6-connected, not reaching the grid border) become part of the mask.
inline Mask fill_holes(const Mask& m) {
    const auto [X, Y, Z] = m.extents;
    std::vector<std::uint8_t> outside(m.v.size(), 0);
    std::deque<std::size_t> q;
    auto visit = [&](std::size_t i) {
        if (!m.v[i] && !outside[i]) {
            outside[i] = 1;
            q.push_back(i);
        }
    };
    for (std::size_t z = 0; z < Z; ++z)
        for (std::size_t y = 0; y < Y; ++y)
            for (std::size_t x = 0; x < X; ++x)
                if (x == 0 || y == 0 || z == 0 || x + 1 == X || y + 1 == Y || z + 1 == Z) visit(m.index(x, y, z));
    while (!q.empty()) {
        const std::size_t i = q.front();
        q.pop_front();
        const std::size_t x = i % X, y = (i / X) % Y, z = i / (X * Y);
        if (x > 0) visit(i - 1);
        if (x + 1 < X) visit(i + 1);
        if (y > 0) visit(i - X);
        if (y + 1 < Y) visit(i + X);
        if (z > 0) visit(i - X * Y);
        if (z + 1 < Z) visit(i + X * Y);
    }
    Mask out = m;
    for (std::size_t i = 0; i < out.v.size(); ++i) out.v[i] = outside[i] ? 0 : 1;
    return out;
}

/// Tumor voxels outside `liver_region` become background.
inline Volume suppress_outside_lesions(const Volume& labels, const Mask& liver_region) {
    if (labels.extents != liver_region.extents) throw std::invalid_argument("suppress_outside_lesions: extents differ");
    Volume out = labels;
    for (std::size_t i = 0; i < out.values.size(); ++i)
        if (out.values[i] == 2.0f && !liver_region.v[i]) out.values[i] = 0.0f;
    return out;
}

struct PostOptions {
    bool fill_holes = false;
};

/// Refined liver region = largest component of (liver ∪ tumor), optionally
/// hole-filled. Labels outside it become background; filled holes become liver.
inline Volume postprocess(const Volume& labels, const PostOptions& opt = {}) {
    Mask region = largest_component(metrics::liver_mask(labels));
    if (opt.fill_holes) region = fill_holes(region);
    Volume out = suppress_outside_lesions(labels, region);
    for (std::size_t i = 0; i < out.values.size(); ++i) {
        if (!region.v[i])
            out.values[i] = 0.0f;
        else if (out.values[i] == 0.0f)
            out.values[i] = 1.0f;
    }
    return out;
}

// -------------------------------------------------------------- end to end

struct PipelineConfig {
    double tau_liver = 0.5;
    double tau_tumor = 0.5;
    std::size_t roi_margin = 10;
    std::size_t connectivity = 26;
    bool fill_holes = false;
    double coarse_factor = 2.0;
    FineOptions fine;

    void validate() const {
        if (!(tau_liver >= 0.0 && tau_liver <= 1.0) || !(tau_tumor >= 0.0 && tau_tumor <= 1.0))
            throw std::invalid_argument("thresholds must lie in [0, 1]");
        if (connectivity != 26) throw std::invalid_argument("only 26-connectivity is supported");
        if (!(coarse_factor >= 1.0)) throw std::invalid_argument("coarse factor must be >= 1");
    }
};

struct CaseResult {
    Volume labels;  // on the input grid, uint8 in {0,1,2}
    RoiBox roi;
    bool roi_fallback = false;
};

/// Full cascade on a raw (HU) image.
template <class T>
CaseResult infer_case(train::CoarseModel<T>& coarse, hybrid::HDenseUNet<T>& fine, const Volume& raw,
                      const data::Preprocessing& pre, const PipelineConfig& cfg) {
    cfg.validate();
    const Volume image = pre.apply(raw);
    CaseResult r;
    const CoarseResult loc = localize(coarse, image, cfg.coarse_factor);
    r.roi_fallback = loc.empty;
    r.roi = loc.empty ? RoiBox::whole(image.extents) : roi_box(loc.mask, cfg.roi_margin);
    const ProbMap probs = fine_predict(fine, crop(image, r.roi), cfg.fine);
    const Volume roi_labels = decide_labels(probs, image.spacing, cfg.tau_liver, cfg.tau_tumor);
    Volume labels = postprocess(paste(roi_labels, r.roi, image), PostOptions{cfg.fill_holes});
    if (labels.extents != raw.extents) {
        // back onto the acquisition grid
        labels = data::resample(labels, raw.spacing, data::Interp::nearest);
        if (labels.extents != raw.extents) {
            Volume fit = Volume::make(raw.extents, raw.spacing, io::DType::uint8);
            for (std::size_t z = 0; z < raw.extents[2]; ++z)
                for (std::size_t y = 0; y < raw.extents[1]; ++y)
                    for (std::size_t x = 0; x < raw.extents[0]; ++x)
                        fit.at(x, y, z) = labels.at(std::min(x, labels.extents[0] - 1),
                                                    std::min(y, labels.extents[1] - 1),
                                                    std::min(z, labels.extents[2] - 1));
            labels = std::move(fit);
        }
    }
    labels.spacing = raw.spacing;
    labels.origin = raw.origin;
    labels.dtype = io::DType::uint8;
    r.labels = std::move(labels);
    return r;
}

}  // namespace hdu::pipeline
