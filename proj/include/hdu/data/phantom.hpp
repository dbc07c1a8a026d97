#pragma once

// Synthetic abdominal phantoms: one liver ellipsoid holding a few spherical
// tumors, on a darker background, plus Gaussian noise.

#include <algorithm>
#include <cmath>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "hdu/io/volume.hpp"

namespace hdu::data {

enum Label : std::uint8_t { kBackground = 0, kLiver = 1, kTumor = 2 };

struct PhantomSpec {
    std::uint64_t seed = 0;
    io::Extents extents{64, 64, 16};
    io::Vec3 spacing{0.69, 0.69, 1.0};

    double background_hu = -80.0;
    double liver_hu = 60.0;
    double tumor_hu = -10.0;
    double noise_sigma = 10.0;

    // Liver semi-axes as fractions of the field of view, drawn per case.
    double liver_inplane_min = 0.26, liver_inplane_max = 0.34;
    double liver_z_min = 0.32, liver_z_max = 0.42;
    double liver_center_jitter = 0.06;  // fraction of the field of view
    double liver_blur_mm = 0.0;         // 0 = sharp edge

    std::size_t tumors_min = 1, tumors_max = 3;
    double tumor_radius_min_mm = 2.5, tumor_radius_max_mm = 4.5;
    double blurred_tumor_fraction = 0.3;  // share of tumors with soft edges
    double tumor_blur_mm = 1.0;
    std::size_t placement_attempts = 200;

    void validate() const {
        for (int a = 0; a < 3; ++a) {
            if (extents[a] == 0) throw std::invalid_argument("phantom extents must be positive");
            if (!(spacing[a] > 0.0)) throw std::invalid_argument("phantom spacing must be positive");
        }
        if (tumors_min > tumors_max) throw std::invalid_argument("phantom tumors_min > tumors_max");
        if (!(tumor_radius_min_mm > 0.0) || tumor_radius_min_mm > tumor_radius_max_mm)
            throw std::invalid_argument("phantom tumor radius range is invalid");
        if (!(liver_inplane_min > 0.0) || liver_inplane_min > liver_inplane_max || !(liver_z_min > 0.0) ||
            liver_z_min > liver_z_max)
            throw std::invalid_argument("phantom liver size range is invalid");
        if (noise_sigma < 0.0 || liver_blur_mm < 0.0 || tumor_blur_mm < 0.0)
            throw std::invalid_argument("phantom noise and blur must be non-negative");
        if (blurred_tumor_fraction < 0.0 || blurred_tumor_fraction > 1.0)
            throw std::invalid_argument("phantom blurred_tumor_fraction must lie in [0, 1]");
    }
};

struct Ellipsoid {
    io::Vec3 center{};  // mm
    io::Vec3 semi_axes{};  // mm

    /// Sum of squared normalized offsets; <= 1 inside.
    double equation(const io::Vec3& p) const {
        double s = 0;
        for (int a = 0; a < 3; ++a) {
            const double d = (p[a] - center[a]) / semi_axes[a];
            s += d * d;
        }
        return s;
    }
};

struct Tumor {
    io::Vec3 center{};  // mm
    double radius = 0;  // mm
    bool blurred = false;
};

struct Phantom {
    io::Volume image;   // HU, float32
    io::Volume labels;  // uint8 in {0, 1, 2}
    Ellipsoid liver;
    std::vector<Tumor> tumors;
    std::size_t tumors_requested = 0;
};

namespace detail {

inline io::Vec3 voxel_mm(const io::Vec3& spacing, std::size_t x, std::size_t y, std::size_t z) {
    return {double(x) * spacing[0], double(y) * spacing[1], double(z) * spacing[2]};
}

inline double soft_step(double signed_mm, double blur_mm) {
    if (blur_mm <= 0.0) return signed_mm >= 0.0 ? 1.0 : 0.0;
    return 1.0 / (1.0 + std::exp(-signed_mm / blur_mm));
}

}  // namespace detail

/// Every voxel of the tumor ball lies inside the liver ellipsoid.
inline bool tumor_inside(const Tumor& t, const Ellipsoid& liver, const io::Vec3& spacing, const io::Extents& ext) {
    bool any = false;
    std::array<std::size_t, 3> lo{}, hi{};
    for (int a = 0; a < 3; ++a) {
        const double l = std::ceil((t.center[a] - t.radius) / spacing[a]);
        const double h = std::floor((t.center[a] + t.radius) / spacing[a]);
        if (h < 0 || l > double(ext[a] - 1)) return false;
        lo[a] = std::size_t(std::max(0.0, l));
        hi[a] = std::size_t(std::min(double(ext[a] - 1), h));
    }
    for (std::size_t z = lo[2]; z <= hi[2]; ++z)
        for (std::size_t y = lo[1]; y <= hi[1]; ++y)
            for (std::size_t x = lo[0]; x <= hi[0]; ++x) {
                const auto p = detail::voxel_mm(spacing, x, y, z);
                double d2 = 0;
                for (int a = 0; a < 3; ++a) d2 += (p[a] - t.center[a]) * (p[a] - t.center[a]);
                if (d2 > t.radius * t.radius) continue;
                if (liver.equation(p) > 1.0) return false;
                any = true;
            }
    return any;
}

inline Phantom generate_phantom(const PhantomSpec& spec) {
    spec.validate();
    std::mt19937_64 rng(spec.seed);
    auto uniform = [&rng](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };

    Phantom ph;
    io::Vec3 fov{};
    for (int a = 0; a < 3; ++a) fov[a] = double(spec.extents[a] - 1) * spec.spacing[a];
    for (int a = 0; a < 3; ++a) {
        const double jitter = a < 2 ? spec.liver_center_jitter : spec.liver_center_jitter / 2;
        ph.liver.center[a] = fov[a] * (0.5 + uniform(-jitter, jitter));
        ph.liver.semi_axes[a] = a < 2 ? fov[a] * uniform(spec.liver_inplane_min, spec.liver_inplane_max)
                                      : fov[a] * uniform(spec.liver_z_min, spec.liver_z_max);
    }

    ph.tumors_requested =
        std::uniform_int_distribution<std::size_t>(spec.tumors_min, spec.tumors_max)(rng);
    for (std::size_t i = 0; i < ph.tumors_requested; ++i) {
        for (std::size_t attempt = 0; attempt < spec.placement_attempts; ++attempt) {
            Tumor t;
            t.radius = uniform(spec.tumor_radius_min_mm, spec.tumor_radius_max_mm);
            // sample the center inside the liver ellipsoid, then verify the whole ball
            for (int a = 0; a < 3; ++a)
                t.center[a] = ph.liver.center[a] + uniform(-1.0, 1.0) * ph.liver.semi_axes[a];
            if (!tumor_inside(t, ph.liver, spec.spacing, spec.extents)) continue;
            t.blurred = uniform(0.0, 1.0) < spec.blurred_tumor_fraction;
            ph.tumors.push_back(t);
            break;
        }
    }

    ph.image = io::Volume::make(spec.extents, spec.spacing, io::DType::float32);
    ph.labels = io::Volume::make(spec.extents, spec.spacing, io::DType::uint8);
    const double min_axis = std::min({ph.liver.semi_axes[0], ph.liver.semi_axes[1], ph.liver.semi_axes[2]});
    std::normal_distribution<double> noise(0.0, spec.noise_sigma);
    for (std::size_t z = 0; z < spec.extents[2]; ++z)
        for (std::size_t y = 0; y < spec.extents[1]; ++y)
            for (std::size_t x = 0; x < spec.extents[0]; ++x) {
                const auto p = detail::voxel_mm(spec.spacing, x, y, z);
                const double eq = ph.liver.equation(p);
                std::uint8_t label = eq <= 1.0 ? kLiver : kBackground;
                // approximate signed distance to the liver surface, positive inside
                const double liver_in = detail::soft_step((1.0 - std::sqrt(eq)) * min_axis, spec.liver_blur_mm);
                double tumor_in = 0.0;
                for (auto& t : ph.tumors) {
                    double d2 = 0;
                    for (int a = 0; a < 3; ++a) d2 += (p[a] - t.center[a]) * (p[a] - t.center[a]);
                    if (d2 <= t.radius * t.radius) label = kTumor;
                    tumor_in = std::max(
                        tumor_in, detail::soft_step(t.radius - std::sqrt(d2), t.blurred ? spec.tumor_blur_mm : 0.0));
                }
                double hu = spec.background_hu + (spec.liver_hu - spec.background_hu) * liver_in +
                            (spec.tumor_hu - spec.liver_hu) * tumor_in * liver_in;
                if (spec.noise_sigma > 0.0) hu += noise(rng);
                ph.image.at(x, y, z) = float(hu);
                ph.labels.at(x, y, z) = float(label);
            }
    return ph;
}

/// The same phantom at a coarser spacing (used by the liver localization stage).
inline io::Vec3 coarse_spacing(const io::Vec3& native, double factor = 2.0) {
    return {native[0] * factor, native[1] * factor, native[2] * factor};
}

}  // namespace hdu::data
