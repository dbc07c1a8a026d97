#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>

#include "hdu/nn/loss.hpp"

namespace hdu::train {

/// Training stages in execution order. `coarse` trains the liver localizer and
/// stands apart from the hybrid chain.
enum class Stage { coarse, warmup2d, stage2d, stage3d_hff, joint };

inline const char* stage_name(Stage s) {
    switch (s) {
        case Stage::coarse: return "coarse";
        case Stage::warmup2d: return "warmup2d";
        case Stage::stage2d: return "stage2d";
        case Stage::stage3d_hff: return "stage3d_hff";
        case Stage::joint: return "joint";
    }
    return "?";
}

inline Stage parse_stage(const std::string& s) {
    for (Stage st : {Stage::coarse, Stage::warmup2d, Stage::stage2d, Stage::stage3d_hff, Stage::joint})
        if (s == stage_name(st)) return st;
    throw std::invalid_argument("unknown stage '" + s + "' (expected coarse, warmup2d, stage2d, stage3d_hff or joint)");
}

/// The stage whose completed checkpoint a stage starts from.
inline std::optional<Stage> prerequisite(Stage s) {
    switch (s) {
        case Stage::stage2d: return Stage::warmup2d;
        case Stage::stage3d_hff: return Stage::stage2d;
        case Stage::joint: return Stage::stage3d_hff;
        default: return std::nullopt;
    }
}

inline bool is_volumetric(Stage s) { return s == Stage::stage3d_hff || s == Stage::joint; }

class StageOrderError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// lr0 * (1 - iter/total)^power.
inline double poly_lr(std::size_t iter, std::size_t total, double lr0, double power = 0.9) {
    if (total == 0) throw std::invalid_argument("poly_lr: total iterations must be positive");
    if (iter > total)
        throw std::invalid_argument("poly_lr: iteration " + std::to_string(iter) + " exceeds total " +
                                    std::to_string(total));
    return lr0 * std::pow(1.0 - double(iter) / double(total), power);
}

struct TrainConfig {
    double lr0 = 0.01;
    double decay_power = 0.9;
    double momentum = 0.9;
    double lambda = 0.5;
    std::size_t batch_2d = 4;
    std::size_t batch_3d = 1;
    std::size_t iters_coarse = 400;
    std::size_t iters_stage2d = 2000;
    double warmup_fraction = 0.1;  // of iters_stage2d
    std::size_t iters_stage3d_hff = 200;
    std::size_t iters_joint = 200;
    bool augment_mirror = true;
    bool augment_scale = true;
    double scale_min = 0.8;
    double scale_max = 1.2;
    std::uint64_t seed = 1;
    nn::LossWeights class_weights;
    std::size_t checkpoint_every = 100;

    std::size_t iterations(Stage s) const {
        switch (s) {
            case Stage::coarse: return iters_coarse;
            case Stage::warmup2d:
                return std::max<std::size_t>(1, std::size_t(std::llround(warmup_fraction * double(iters_stage2d))));
            case Stage::stage2d: return iters_stage2d;
            case Stage::stage3d_hff: return iters_stage3d_hff;
            case Stage::joint: return iters_joint;
        }
        return 0;
    }

    void validate() const {
        auto fail = [](const std::string& m) { throw std::invalid_argument("TrainConfig: " + m); };
        if (!(lr0 > 0.0)) fail("lr0 must be positive");
        if (!(decay_power > 0.0)) fail("decay power must be positive");
        if (!(momentum >= 0.0 && momentum < 1.0)) fail("momentum must lie in [0, 1)");
        if (!(lambda >= 0.0 && lambda <= 1.0)) fail("lambda must lie in [0, 1]");
        if (batch_2d == 0 || batch_3d == 0) fail("batch sizes must be positive");
        for (Stage s : {Stage::coarse, Stage::warmup2d, Stage::stage2d, Stage::stage3d_hff, Stage::joint})
            if (iterations(s) == 0) fail(std::string("total iterations of ") + stage_name(s) + " must be >= 1");
        if (!(warmup_fraction > 0.0 && warmup_fraction <= 1.0)) fail("warm-up fraction must lie in (0, 1]");
        if (!(scale_min > 0.0 && scale_min <= scale_max)) fail("scale range must satisfy 0 < min <= max");
        if (checkpoint_every == 0) fail("checkpoint interval must be positive");
        class_weights.validate(3);
    }
};

}  // namespace hdu::train
