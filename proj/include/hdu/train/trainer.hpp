#pragma once

// Stage runner. Each stage writes `<stage>.ckpt` into the work directory:
// periodic checkpoints carry complete=false and allow an exact resume (model
// values, momentum buffers, iteration and sampler state); the final one
// carries complete=true and seeds the next stage. Every step appends
// `iter<TAB>stage<TAB>lr<TAB>loss` to `trace.tsv`.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "hdu/data/phantom.hpp"
#include "hdu/data/preprocess.hpp"
#include "hdu/io/checkpoint.hpp"
#include "hdu/train/augment.hpp"
#include "hdu/train/models.hpp"
#include "hdu/train/optimizer.hpp"
#include "hdu/train/schedule.hpp"

namespace hdu::train {

namespace fs = std::filesystem;

/// A preprocessed training case: normalized intensities and labels in {0,1,2}.
struct TrainingCase {
    std::string id;
    io::Volume image;
    io::Volume labels;
};

/// Cases for the liver localizer: resampled to the coarse spacing, labels reduced to liver-or-tumor versus rest.
inline std::vector<TrainingCase> coarse_cases(const std::vector<TrainingCase>& cases, double factor = 2.0) {
    std::vector<TrainingCase> out;
    for (auto& c : cases) {
        const io::Vec3 target = data::coarse_spacing(c.image.spacing, factor);
        TrainingCase k{c.id, data::resample(c.image, target, data::Interp::trilinear),
                       data::resample(c.labels, target, data::Interp::nearest)};
        for (auto& v : k.labels.values) v = v > 0.0f ? 1.0f : 0.0f;
        out.push_back(std::move(k));
    }
    return out;
}

struct Batch {
    Tensor<float> x;
    nn::LabelMap y;
};

/// Slice triplet centred on `z` (clamped at the ends) as 3 x (X, Y) planes, appended to `out`.
inline void append_triplet(const io::Volume& v, std::size_t z, std::vector<float>& out) {
    const auto [X, Y, Z] = v.extents;
    for (int j = -1; j <= 1; ++j) {
        const auto zz = std::size_t(std::clamp<std::ptrdiff_t>(std::ptrdiff_t(z) + j, 0, std::ptrdiff_t(Z) - 1));
        for (std::size_t x = 0; x < X; ++x)
            for (std::size_t y = 0; y < Y; ++y) out.push_back(v.at(x, y, zz));
    }
}

inline Batch sample_2d(const std::vector<TrainingCase>& cases, std::size_t batch, std::mt19937_64& rng,
                       const TrainConfig& cfg) {
    const std::size_t X = cases[0].image.extents[0], Y = cases[0].image.extents[1];
    std::vector<float> xs;
    nn::LabelMap y{Shape{batch, X, Y}, {}};
    std::uniform_int_distribution<std::size_t> pick(0, cases.size() - 1);
    for (std::size_t b = 0; b < batch; ++b) {
        const TrainingCase& c = cases[pick(rng)];
        if (c.image.extents[0] != X || c.image.extents[1] != Y)
            throw ShapeError("training cases differ in slice extents (" + c.id + ")");
        const auto [img, lab] = augment(c.image, c.labels, draw_augment(rng, cfg));
        const std::size_t z = std::uniform_int_distribution<std::size_t>(0, img.extents[2] - 1)(rng);
        append_triplet(img, z, xs);
        for (std::size_t x = 0; x < X; ++x)
            for (std::size_t yy = 0; yy < Y; ++yy) y.values.push_back(std::uint8_t(lab.at(x, yy, z)));
    }
    return {Tensor<float>(Shape{batch, 3, X, Y}, std::move(xs), false), std::move(y)};
}

inline Batch sample_3d(const std::vector<TrainingCase>& cases, std::size_t batch, std::mt19937_64& rng,
                       const TrainConfig& cfg) {
    std::vector<io::Volume> imgs, labs;
    std::uniform_int_distribution<std::size_t> pick(0, cases.size() - 1);
    for (std::size_t b = 0; b < batch; ++b) {
        const TrainingCase& c = cases[pick(rng)];
        auto [img, lab] = augment(c.image, c.labels, draw_augment(rng, cfg));
        imgs.push_back(std::move(img));
        labs.push_back(std::move(lab));
    }
    std::vector<const io::Volume*> pi, pl;
    for (std::size_t b = 0; b < batch; ++b) {
        pi.push_back(&imgs[b]);
        pl.push_back(&labs[b]);
    }
    return {data::to_tensor_batch<float>(pi), data::to_label_map(pl)};
}

struct TraceRow {
    std::size_t iteration = 0;
    std::string stage;
    double lr = 0;
    double loss = 0;
};

inline std::string format_trace_row(const TraceRow& r) {
    return std::to_string(r.iteration) + "\t" + r.stage + "\t" + io::detail::format_double(r.lr) + "\t" +
           io::detail::format_double(r.loss);
}

inline std::vector<TraceRow> read_trace(const fs::path& path) {
    std::vector<TraceRow> rows;
    std::ifstream is(path);
    if (!is) return rows;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::vector<std::string> f;
        std::istringstream ls(line);
        for (std::string t; std::getline(ls, t, '\t');) f.push_back(t);
        if (f.size() != 4) throw io::FormatError(path.string() + ":" + std::to_string(lineno) + ": malformed trace line");
        rows.push_back({io::detail::parse_size(f[0], "trace iteration"), f[1],
                        io::detail::parse_double(f[2], "trace lr"), io::detail::parse_double(f[3], "trace loss")});
    }
    return rows;
}

inline void write_trace(const fs::path& path, const std::vector<TraceRow>& rows) {
    std::string text;
    for (auto& r : rows) text += format_trace_row(r) + "\n";
    io::detail::write_file(path, text);
}

/// Losses of one stage, in iteration order.
inline std::vector<double> stage_losses(const std::vector<TraceRow>& rows, const std::string& stage) {
    std::vector<double> out;
    for (auto& r : rows)
        if (r.stage == stage) out.push_back(r.loss);
    return out;
}

/// Trailing moving average; entry i averages losses[max(0, i-window+1) .. i].
inline std::vector<double> smoothed(const std::vector<double>& losses, std::size_t window) {
    std::vector<double> out(losses.size());
    double acc = 0;
    for (std::size_t i = 0; i < losses.size(); ++i) {
        acc += losses[i];
        if (i >= window) acc -= losses[i - window];
        out[i] = acc / double(std::min(i + 1, window));
    }
    return out;
}

struct StageReport {
    Stage stage = Stage::warmup2d;
    std::size_t start_iteration = 0;  // steps already done when this run began
    std::size_t end_iteration = 0;
    std::size_t total = 0;
    bool resumed = false;
    bool complete = false;
    bool already_complete = false;
    double last_loss = std::nan("");
    fs::path checkpoint;
};

struct RunOptions {
    /// Stop after this many steps without writing a checkpoint, as an interrupted run would.
    std::optional<std::size_t> stop_after;
    std::function<void(const TraceRow&)> on_step;
};

class Trainer {
public:
    Trainer(TrainConfig cfg, hybrid::HybridConfig model, fs::path work_dir)
        : cfg_(std::move(cfg)), model_(std::move(model)), work_(std::move(work_dir)) {
        cfg_.validate();
        model_.validate();
    }

    fs::path checkpoint_path(Stage s) const { return work_ / (std::string(stage_name(s)) + ".ckpt"); }
    fs::path trace_path() const { return work_ / "trace.tsv"; }
    const TrainConfig& config() const { return cfg_; }

    StageReport run(Stage s, const std::vector<TrainingCase>& cases, const RunOptions& opts = {}) {
        if (cases.empty()) throw std::invalid_argument("no training cases");
        fs::create_directories(work_);
        StageReport rep;
        rep.stage = s;
        rep.total = cfg_.iterations(s);
        rep.checkpoint = checkpoint_path(s);

        Session sess;
        OptimizerState<float> opt;
        std::mt19937_64 rng = stage_rng(s);
        if (fs::exists(rep.checkpoint)) {
            const io::Checkpoint ck = io::load(rep.checkpoint);
            check_stage_header(ck, s, rep.total);
            if (ck.header_value("complete") == "true") {
                rep.already_complete = rep.complete = true;
                rep.start_iteration = rep.end_iteration = rep.total;
                return rep;
            }
            sess.load(ck, s);
            for (auto& [name, sv] : io::entries_as<float>(ck, kVelocity)) opt.velocity[name] = std::move(sv.second);
            std::istringstream(ck.header_value("rng")) >> rng;
            opt.iteration = rep.start_iteration = io::detail::parse_size(ck.header_value("iteration"), "iteration");
            rep.resumed = true;
        } else if (auto pre = prerequisite(s)) {
            const fs::path pp = checkpoint_path(*pre);
            if (!fs::exists(pp))
                throw StageOrderError(std::string("stage ") + stage_name(s) + " requires a completed " +
                                      stage_name(*pre) + " checkpoint (" + pp.string() + " not found)");
            const io::Checkpoint ck = io::load(pp);
            if (ck.header_value("complete") != "true")
                throw StageOrderError(std::string("stage ") + stage_name(s) + " requires a completed " +
                                      stage_name(*pre) + " checkpoint (" + pp.string() + " is unfinished)");
            sess.load(ck, s);
        } else {
            sess.fresh(s, model_);
        }
        prune_trace(s, rep.start_iteration);
        sess.configure(s);

        const std::vector<TrainingCase> coarse = s == Stage::coarse ? coarse_cases(cases) : std::vector<TrainingCase>{};
        const auto& data = s == Stage::coarse ? coarse : cases;
        const nn::LossWeights weights =
            s == Stage::coarse ? nn::LossWeights{{cfg_.class_weights.w[0], cfg_.class_weights.w[1]}} : cfg_.class_weights;

        std::ofstream trace(trace_path(), std::ios::app);
        if (!trace) throw std::runtime_error("cannot append to " + trace_path().string());
        std::size_t k = rep.start_iteration;
        for (; k < rep.total; ++k) {
            if (opts.stop_after && k - rep.start_iteration >= *opts.stop_after) break;
            const double lr = poly_lr(k, rep.total, cfg_.lr0, cfg_.decay_power);
            const double loss = sess.step(s, data, rng, cfg_, weights, opt, lr);
            const TraceRow row{k + 1, stage_name(s), lr, loss};
            trace << format_trace_row(row) << "\n" << std::flush;
            if (opts.on_step) opts.on_step(row);
            rep.last_loss = loss;
            if ((k + 1) % cfg_.checkpoint_every == 0 && k + 1 < rep.total) save(sess, opt, rng, s, k + 1, false);
        }
        rep.end_iteration = k;
        if (k == rep.total) {
            save(sess, opt, rng, s, k, true);
            rep.complete = true;
        }
        return rep;
    }

private:
    static constexpr const char* kVelocity = "velocity.";

    struct Session {
        std::unique_ptr<hybrid::HDenseUNet<float>> hybrid;
        std::unique_ptr<CoarseModel<float>> coarse;

        arch::ParameterSet<float>& params() { return hybrid ? hybrid->params() : coarse->params(); }

        std::map<std::string, std::string> header() const {
            return hybrid ? model_header(hybrid->config()) : model_header(*coarse);
        }

        void fresh(Stage s, const hybrid::HybridConfig& cfg) {
            if (s == Stage::coarse)
                coarse = std::make_unique<CoarseModel<float>>(coarse_config(), cfg.seed, cfg.norm);
            else
                hybrid = std::make_unique<hybrid::HDenseUNet<float>>(cfg);
        }

        void load(const io::Checkpoint& ck, Stage s) {
            if (s == Stage::coarse)
                coarse = load_coarse<float>(ck);
            else
                hybrid = load_hybrid<float>(ck);
        }

        void configure(Stage s) {
            if (!hybrid) return;
            auto& p = hybrid->params();
            const bool freeze2d = s == Stage::stage3d_hff;
            p.set_frozen(hybrid::kTheta2d, freeze2d);
            p.set_frozen(hybrid::kTheta2dCls, freeze2d);
            hybrid->seg2d().net().set_unet_connections(s != Stage::warmup2d);
        }

        double step(Stage s, const std::vector<TrainingCase>& data, std::mt19937_64& rng, const TrainConfig& cfg,
                    const nn::LossWeights& weights, OptimizerState<float>& opt, double lr) {
            Tensor<float> loss;
            if (s == Stage::coarse) {
                auto b = sample_2d(data, cfg.batch_2d, rng, cfg);
                loss = nn::softmax_cross_entropy(coarse->seg().forward(b.x, nn::Mode::train).logits, b.y, weights);
            } else if (!is_volumetric(s)) {
                auto b = sample_2d(data, cfg.batch_2d, rng, cfg);
                loss = nn::softmax_cross_entropy(hybrid->forward_2d(b.x, nn::Mode::train).logits, b.y, weights);
            } else if (s == Stage::stage3d_hff) {
                auto b = sample_3d(data, cfg.batch_3d, rng, cfg);
                auto o = hybrid->forward(b.x, nn::Mode::eval, nn::Mode::train);
                loss = nn::softmax_cross_entropy(o.logits_h, b.y, weights);
            } else {
                auto b = sample_3d(data, cfg.batch_3d, rng, cfg);
                auto o = hybrid->forward(b.x, nn::Mode::train, nn::Mode::train);
                loss = hybrid::joint_loss(o.logits2d, o.logits_h, b.y, weights, cfg.lambda);
            }
            const double value = loss.item();
            if (!std::isfinite(value))
                throw NumericError(std::string("non-finite loss in ") + stage_name(s) + " at iteration " +
                                   std::to_string(opt.iteration));
            params().zero_grad();
            backward(loss);
            sgd_step(params(), opt, lr, cfg.momentum);
            return value;
        }
    };

    std::mt19937_64 stage_rng(Stage s) const {
        std::seed_seq seq{std::uint32_t(cfg_.seed), std::uint32_t(cfg_.seed >> 32), std::uint32_t(s)};
        return std::mt19937_64(seq);
    }

    void check_stage_header(const io::Checkpoint& ck, Stage s, std::size_t total) const {
        if (ck.header_value("stage") != stage_name(s))
            throw io::FormatError(checkpoint_path(s).string() + " belongs to stage '" + ck.header_value("stage") + "'");
        const std::string t = ck.header_value("total_iterations");
        if (t != std::to_string(total))
            throw std::invalid_argument(checkpoint_path(s).string() + " was written for " + t +
                                        " iterations, the configuration asks for " + std::to_string(total));
    }

    /// Drops trace rows of `s` past `keep`: steps taken after the checkpoint being resumed from.
    void prune_trace(Stage s, std::size_t keep) const {
        if (!fs::exists(trace_path())) return;
        auto rows = read_trace(trace_path());
        const auto n = rows.size();
        std::erase_if(rows, [&](const TraceRow& r) { return r.stage == stage_name(s) && r.iteration > keep; });
        if (rows.size() != n) write_trace(trace_path(), rows);
    }

    void save(Session& sess, const OptimizerState<float>& opt, const std::mt19937_64& rng, Stage s, std::size_t iter,
              bool complete) const {
        io::Checkpoint ck;
        ck.header = sess.header();
        ck.header["stage"] = stage_name(s);
        ck.header["iteration"] = std::to_string(iter);
        ck.header["total_iterations"] = std::to_string(cfg_.iterations(s));
        ck.header["complete"] = complete ? "true" : "false";
        std::ostringstream rs;
        rs << rng;
        ck.header["rng"] = rs.str();
        ck.header["train.seed"] = std::to_string(cfg_.seed);
        ck.header["train.lr0"] = io::detail::format_double(cfg_.lr0);
        ck.header["train.momentum"] = io::detail::format_double(cfg_.momentum);
        ck.header["train.lambda"] = io::detail::format_double(cfg_.lambda);
        io::append_parameters(ck, sess.params());
        for (auto& [name, v] : opt.velocity)
            ck.entries.push_back({kVelocity + name, sess.params().at(name).shape(), v});
        io::save(ck, checkpoint_path(s));
    }

    TrainConfig cfg_;
    hybrid::HybridConfig model_;
    fs::path work_;
};

}  // namespace hdu::train
