#pragma once

// Command-line front end: phantom generation, staged training, inference,
// evaluation and configuration dump. `run` is the whole program; the
// executable only forwards argv to it.

#include <png.h>

#include <algorithm>
#include <atomic>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <mutex>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "hdu/data/phantom.hpp"
#include "hdu/data/preprocess.hpp"
#include "hdu/io/manifest.hpp"
#include "hdu/metrics.hpp"
#include "hdu/pipeline.hpp"
#include "hdu/training.hpp"

namespace hdu::cli {

namespace fs = std::filesystem;

enum ExitCode : int { kOk = 0, kUsage = 2, kData = 3, kNumeric = 4 };

/// Bad command line or configuration.
class UsageError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Every tunable default, addressable as `section.key = value`.
struct RunConfig {
    train::TrainConfig train;
    hybrid::HybridConfig model;
    pipeline::PipelineConfig infer;
    data::Preprocessing preprocess;
    data::PhantomSpec phantom;

    void validate() const {
        train.validate();
        model.validate();
        infer.validate();
        phantom.validate();
        train.class_weights.validate(model.net2d.num_classes);
        if (!(preprocess.window_high > preprocess.window_low)) throw std::invalid_argument("empty intensity window");
        if (infer.fine.tile_depth % pipeline::kFineMultiple[2] != 0 || infer.fine.tile_margin % pipeline::kFineMultiple[2] != 0)
            throw std::invalid_argument("infer.tile_depth and infer.tile_margin must be multiples of " +
                                        std::to_string(pipeline::kFineMultiple[2]));
    }
};

namespace detail {

inline std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

inline std::vector<std::string> split_list(const std::string& s, char sep = ',') {
    std::vector<std::string> out;
    std::istringstream is(s);
    for (std::string t; std::getline(is, t, sep);) out.push_back(trim(t));
    return out;
}

inline double parse_real(const std::string& v, const std::string& key) {
    try {
        std::size_t used = 0;
        const double d = std::stod(v, &used);
        if (used == v.size() && std::isfinite(d)) return d;
    } catch (const std::exception&) {
    }
    throw UsageError("config key '" + key + "' expects a number, got '" + v + "'");
}

inline std::uint64_t parse_unsigned(const std::string& v, const std::string& key) {
    if (v.empty() || !std::all_of(v.begin(), v.end(), [](char c) { return c >= '0' && c <= '9'; }))
        throw UsageError("config key '" + key + "' expects a non-negative integer, got '" + v + "'");
    try {
        return std::stoull(v);
    } catch (const std::exception&) {
        throw UsageError("config key '" + key + "' is out of range: '" + v + "'");
    }
}

inline bool parse_flag(const std::string& v, const std::string& key) {
    if (v == "true") return true;
    if (v == "false") return false;
    throw UsageError("config key '" + key + "' expects true or false, got '" + v + "'");
}

inline std::string fmt(double v) { return io::detail::format_double(v); }

template <class Seq>
std::string join(const Seq& s) {
    std::string out;
    for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + fmt(double(s[i]));
    return out;
}

struct Field {
    std::string key;
    std::function<std::string(const RunConfig&)> get;
    std::function<void(RunConfig&, const std::string&)> set;
};

template <class Acc>
Field real(std::string key, Acc acc) {
    return {key, [acc](const RunConfig& c) { return fmt(acc(c)); },
            [acc, key](RunConfig& c, const std::string& v) { acc(c) = parse_real(v, key); }};
}

template <class Acc>
Field count(std::string key, Acc acc) {
    return {key, [acc](const RunConfig& c) { return std::to_string(acc(c)); },
            [acc, key](RunConfig& c, const std::string& v) {
                acc(c) = static_cast<std::remove_reference_t<decltype(acc(c))>>(parse_unsigned(v, key));
            }};
}

template <class Acc>
Field flag(std::string key, Acc acc) {
    return {key, [acc](const RunConfig& c) { return std::string(acc(c) ? "true" : "false"); },
            [acc, key](RunConfig& c, const std::string& v) { acc(c) = parse_flag(v, key); }};
}

template <class Acc>
Field triple(std::string key, Acc acc) {
    return {key, [acc](const RunConfig& c) { return join(acc(c)); },
            [acc, key](RunConfig& c, const std::string& v) {
                auto parts = split_list(v);
                if (parts.size() != 3) throw UsageError("config key '" + key + "' expects three comma-separated values");
                auto& dst = acc(c);
                using E = std::remove_reference_t<decltype(dst[0])>;
                for (std::size_t i = 0; i < 3; ++i)
                    dst[i] = std::is_integral_v<E> ? E(parse_unsigned(parts[i], key)) : E(parse_real(parts[i], key));
            }};
}

inline Field net_field(const std::string& prefix, arch::DenseUNetConfig hybrid::HybridConfig::*net, const std::string& k) {
    const std::string key = prefix + k;
    return {key, [net, k](const RunConfig& c) { return (c.model.*net).to_fields().at(k); },
            [net, k, key](RunConfig& c, const std::string& v) {
                auto f = (c.model.*net).to_fields();
                f[k] = v;
                try {
                    c.model.*net = arch::DenseUNetConfig::from_fields(f);
                } catch (const std::exception& e) {
                    throw UsageError("config key '" + key + "': " + e.what());
                }
            }};
}

inline std::vector<Field> build_fields() {
    std::vector<Field> f;
    // training
    f.push_back(real("train.lr0", [](auto& c) -> auto& { return c.train.lr0; }));
    f.push_back(real("train.decay_power", [](auto& c) -> auto& { return c.train.decay_power; }));
    f.push_back(real("train.momentum", [](auto& c) -> auto& { return c.train.momentum; }));
    f.push_back(real("train.lambda", [](auto& c) -> auto& { return c.train.lambda; }));
    f.push_back(count("train.batch_2d", [](auto& c) -> auto& { return c.train.batch_2d; }));
    f.push_back(count("train.batch_3d", [](auto& c) -> auto& { return c.train.batch_3d; }));
    f.push_back(count("train.iters_coarse", [](auto& c) -> auto& { return c.train.iters_coarse; }));
    f.push_back(count("train.iters_stage2d", [](auto& c) -> auto& { return c.train.iters_stage2d; }));
    f.push_back(real("train.warmup_fraction", [](auto& c) -> auto& { return c.train.warmup_fraction; }));
    f.push_back(count("train.iters_stage3d_hff", [](auto& c) -> auto& { return c.train.iters_stage3d_hff; }));
    f.push_back(count("train.iters_joint", [](auto& c) -> auto& { return c.train.iters_joint; }));
    f.push_back(flag("train.augment_mirror", [](auto& c) -> auto& { return c.train.augment_mirror; }));
    f.push_back(flag("train.augment_scale", [](auto& c) -> auto& { return c.train.augment_scale; }));
    f.push_back(real("train.scale_min", [](auto& c) -> auto& { return c.train.scale_min; }));
    f.push_back(real("train.scale_max", [](auto& c) -> auto& { return c.train.scale_max; }));
    f.push_back(count("train.seed", [](auto& c) -> auto& { return c.train.seed; }));
    f.push_back({"train.class_weights", [](const RunConfig& c) { return join(c.train.class_weights.w); },
                 [](RunConfig& c, const std::string& v) {
                     std::vector<double> w;
                     for (auto& p : split_list(v)) w.push_back(parse_real(p, "train.class_weights"));
                     c.train.class_weights.w = std::move(w);
                 }});
    f.push_back(count("train.checkpoint_every", [](auto& c) -> auto& { return c.train.checkpoint_every; }));
    // model
    f.push_back(count("model.seed", [](auto& c) -> auto& { return c.model.seed; }));
    f.push_back(real("model.norm.epsilon", [](auto& c) -> auto& { return c.model.norm.epsilon; }));
    f.push_back(real("model.norm.momentum", [](auto& c) -> auto& { return c.model.norm.momentum; }));
    for (auto& [k, v] : arch::DenseUNetConfig::tiny_2d().to_fields())
        f.push_back(net_field("model.net2d.", &hybrid::HybridConfig::net2d, k));
    for (auto& [k, v] : arch::DenseUNetConfig::tiny_3d().to_fields())
        f.push_back(net_field("model.net3d.", &hybrid::HybridConfig::net3d, k));
    // inference
    f.push_back(real("infer.tau_liver", [](auto& c) -> auto& { return c.infer.tau_liver; }));
    f.push_back(real("infer.tau_tumor", [](auto& c) -> auto& { return c.infer.tau_tumor; }));
    f.push_back(count("infer.roi_margin", [](auto& c) -> auto& { return c.infer.roi_margin; }));
    f.push_back(count("infer.connectivity", [](auto& c) -> auto& { return c.infer.connectivity; }));
    f.push_back(flag("infer.fill_holes", [](auto& c) -> auto& { return c.infer.fill_holes; }));
    f.push_back(real("infer.coarse_factor", [](auto& c) -> auto& { return c.infer.coarse_factor; }));
    f.push_back(count("infer.tile_depth", [](auto& c) -> auto& { return c.infer.fine.tile_depth; }));
    f.push_back(count("infer.tile_margin", [](auto& c) -> auto& { return c.infer.fine.tile_margin; }));
    // preprocessing
    f.push_back(real("preprocess.window_low", [](auto& c) -> auto& { return c.preprocess.window_low; }));
    f.push_back(real("preprocess.window_high", [](auto& c) -> auto& { return c.preprocess.window_high; }));
    f.push_back({"preprocess.resample",
                 [](const RunConfig& c) {
                     return c.preprocess.target_spacing ? join(*c.preprocess.target_spacing) : std::string("native");
                 },
                 [](RunConfig& c, const std::string& v) {
                     if (v == "native") {
                         c.preprocess.target_spacing.reset();
                         return;
                     }
                     auto parts = split_list(v);
                     if (parts.size() != 3) throw UsageError("preprocess.resample expects 'native' or three spacings");
                     io::Vec3 s{};
                     for (int a = 0; a < 3; ++a) {
                         s[a] = parse_real(parts[a], "preprocess.resample");
                         if (!(s[a] > 0.0)) throw UsageError("preprocess.resample spacings must be positive");
                     }
                     c.preprocess.target_spacing = s;
                 }});
    // phantoms
    f.push_back(count("phantom.seed", [](auto& c) -> auto& { return c.phantom.seed; }));
    f.push_back(triple("phantom.extents", [](auto& c) -> auto& { return c.phantom.extents; }));
    f.push_back(triple("phantom.spacing", [](auto& c) -> auto& { return c.phantom.spacing; }));
    f.push_back(real("phantom.background_hu", [](auto& c) -> auto& { return c.phantom.background_hu; }));
    f.push_back(real("phantom.liver_hu", [](auto& c) -> auto& { return c.phantom.liver_hu; }));
    f.push_back(real("phantom.tumor_hu", [](auto& c) -> auto& { return c.phantom.tumor_hu; }));
    f.push_back(real("phantom.noise_sigma", [](auto& c) -> auto& { return c.phantom.noise_sigma; }));
    f.push_back(real("phantom.liver_blur_mm", [](auto& c) -> auto& { return c.phantom.liver_blur_mm; }));
    f.push_back(count("phantom.tumors_min", [](auto& c) -> auto& { return c.phantom.tumors_min; }));
    f.push_back(count("phantom.tumors_max", [](auto& c) -> auto& { return c.phantom.tumors_max; }));
    f.push_back(real("phantom.tumor_radius_min_mm", [](auto& c) -> auto& { return c.phantom.tumor_radius_min_mm; }));
    f.push_back(real("phantom.tumor_radius_max_mm", [](auto& c) -> auto& { return c.phantom.tumor_radius_max_mm; }));
    f.push_back(real("phantom.blurred_tumor_fraction", [](auto& c) -> auto& { return c.phantom.blurred_tumor_fraction; }));
    f.push_back(real("phantom.tumor_blur_mm", [](auto& c) -> auto& { return c.phantom.tumor_blur_mm; }));
    return f;
}

inline const std::vector<Field>& fields() {
    static const std::vector<Field> f = build_fields();
    return f;
}

}  // namespace detail

inline void set_key(RunConfig& c, const std::string& key, const std::string& value) {
    for (auto& f : detail::fields())
        if (f.key == key) return f.set(c, detail::trim(value));
    throw UsageError("unknown config key '" + key + "'");
}

inline std::string get_key(const RunConfig& c, const std::string& key) {
    for (auto& f : detail::fields())
        if (f.key == key) return f.get(c);
    throw UsageError("unknown config key '" + key + "'");
}

/// `key = value` per line, in a fixed order; readable by `apply_config_text`.
inline std::string dump_config(const RunConfig& c) {
    std::string out;
    for (auto& f : detail::fields()) out += f.key + " = " + f.get(c) + "\n";
    return out;
}

/// Applies `key = value` lines; blank lines and `#` comments are skipped.
inline void apply_config_text(RunConfig& c, const std::string& text, const std::string& origin = "config") {
    std::istringstream is(text);
    std::size_t lineno = 0;
    for (std::string line; std::getline(is, line);) {
        ++lineno;
        if (auto h = line.find('#'); h != std::string::npos) line.erase(h);
        line = detail::trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw UsageError(origin + ":" + std::to_string(lineno) + ": expected 'key = value'");
        set_key(c, detail::trim(line.substr(0, eq)), line.substr(eq + 1));
    }
}

inline RunConfig load_run_config(const std::string& file, const std::vector<std::string>& overrides) {
    RunConfig c;
    if (!file.empty()) {
        std::ifstream is(file);
        if (!is) throw UsageError("cannot read config file " + file);
        std::stringstream ss;
        ss << is.rdbuf();
        apply_config_text(c, ss.str(), file);
    }
    for (auto& o : overrides) {
        const auto eq = o.find('=');
        if (eq == std::string::npos) throw UsageError("--set expects KEY=VALUE, got '" + o + "'");
        set_key(c, detail::trim(o.substr(0, eq)), o.substr(eq + 1));
    }
    try {
        c.validate();
    } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
    }
    return c;
}

// ---------------------------------------------------------------------------
// overlays

/// RGB slice: windowed grey, liver blended towards red, tumor towards green.
inline std::vector<std::uint8_t> overlay_slice(const io::Volume& image, const io::Volume& labels, std::size_t z,
                                               double lo = data::kWindowLow, double hi = data::kWindowHigh) {
    const std::size_t X = image.extents[0], Y = image.extents[1];
    std::vector<std::uint8_t> rgb(3 * X * Y);
    for (std::size_t y = 0; y < Y; ++y)
        for (std::size_t x = 0; x < X; ++x) {
            const double g = std::clamp((double(image.at(x, y, z)) - lo) / (hi - lo), 0.0, 1.0) * 255.0;
            double px[3] = {g, g, g};
            const float l = labels.at(x, y, z);
            if (l == 1.0f || l == 2.0f) {
                const int tint = l == 1.0f ? 0 : 1;
                for (int ch = 0; ch < 3; ++ch) px[ch] = 0.5 * g + (ch == tint ? 127.5 : 0.0);
            }
            for (int ch = 0; ch < 3; ++ch) rgb[3 * (y * X + x) + ch] = std::uint8_t(std::lround(px[ch]));
        }
    return rgb;
}

inline void write_png(const fs::path& path, const std::vector<std::uint8_t>& rgb, std::size_t width, std::size_t height) {
    png_image img{};
    img.version = PNG_IMAGE_VERSION;
    img.width = png_uint_32(width);
    img.height = png_uint_32(height);
    img.format = PNG_FORMAT_RGB;
    if (!png_image_write_to_file(&img, path.string().c_str(), 0, rgb.data(), 0, nullptr)) {
        const std::string msg = img.message;
        png_image_free(&img);
        throw std::runtime_error("cannot write " + path.string() + ": " + msg);
    }
}

/// One PNG per axial slice, `slice_<z>.png`, in `dir`.
inline std::size_t write_overlays(const io::Volume& image, const io::Volume& labels, const fs::path& dir,
                                  const data::Preprocessing& pre = {}) {
    if (!image.same_grid(labels)) throw io::FormatError("overlay: image and labels differ in extents");
    fs::create_directories(dir);
    for (std::size_t z = 0; z < image.extents[2]; ++z) {
        std::ostringstream name;
        name << "slice_" << std::setw(3) << std::setfill('0') << z << ".png";
        write_png(dir / name.str(), overlay_slice(image, labels, z, pre.window_low, pre.window_high), image.extents[0],
                  image.extents[1]);
    }
    return image.extents[2];
}

// ---------------------------------------------------------------------------
// commands

/// Serialized console output shared by worker threads.
class Log {
public:
    Log(std::ostream& out, std::ostream& err) : out_(out), err_(err) {}
    void info(const std::string& m) {
        std::lock_guard lock(mu_);
        out_ << m << "\n";
    }
    void error(const std::string& m) {
        std::lock_guard lock(mu_);
        err_ << "error: " << m << "\n";
    }

private:
    std::mutex mu_;
    std::ostream& out_;
    std::ostream& err_;
};

inline std::string case_name(std::size_t i) {
    std::ostringstream os;
    os << "case_" << std::setw(3) << std::setfill('0') << i;
    return os.str();
}

/// Writes `n` phantoms and `manifest.tsv`; the last `holdout` cases get split "test".
inline fs::path cmd_phantom(std::size_t n, const fs::path& out, const RunConfig& cfg, std::size_t holdout, Log& log) {
    if (holdout > n) throw UsageError("--holdout exceeds the number of cases");
    fs::create_directories(out);
    io::Manifest m;
    m.preprocessing = cfg.preprocess.to_string();
    for (std::size_t i = 0; i < n; ++i) {
        data::PhantomSpec spec = cfg.phantom;
        spec.seed = cfg.phantom.seed + i;
        const auto ph = data::generate_phantom(spec);
        const fs::path image = out / (case_name(i) + ".hdr"), label = out / (case_name(i) + "_seg.hdr");
        io::write_volume(ph.image, image);
        io::write_volume(ph.labels, label);
        m.entries.push_back({case_name(i), image, label, i + holdout >= n ? "test" : "train"});
    }
    const fs::path path = out / "manifest.tsv";
    io::write_manifest(m, path);
    log.info("wrote " + std::to_string(n) + " phantoms and " + path.string());
    return path;
}

inline std::vector<train::TrainingCase> load_training_cases(const io::Manifest& m, const std::string& split,
                                                           const data::Preprocessing& pre) {
    std::vector<train::TrainingCase> out;
    for (auto* e : m.split(split)) {
        if (e->label.empty()) throw io::FormatError("training case " + e->id + " has no label volume");
        out.push_back({e->id, pre.apply(io::read_volume(e->image)), pre.apply_labels(io::read_volume(e->label))});
    }
    if (out.empty()) throw io::FormatError("manifest has no cases in split '" + split + "'");
    return out;
}

inline std::vector<train::Stage> parse_stages(const std::string& s) {
    using train::Stage;
    if (s == "all") return {Stage::coarse, Stage::warmup2d, Stage::stage2d, Stage::stage3d_hff, Stage::joint};
    std::vector<Stage> out;
    for (auto& name : detail::split_list(s)) {
        try {
            out.push_back(train::parse_stage(name));
        } catch (const std::exception& e) {
            throw UsageError(e.what());
        }
    }
    if (out.empty()) throw UsageError("no training stage given");
    return out;
}

struct TrainArgs {
    fs::path manifest, work;
    std::string stages = "all";
    std::string split = "train";
    std::optional<std::size_t> stop_after;
};

inline void cmd_train(const TrainArgs& a, const RunConfig& cfg, Log& log) {
    const auto stages = parse_stages(a.stages);
    const auto cases = load_training_cases(io::read_manifest(a.manifest), a.split, cfg.preprocess);
    fs::create_directories(a.work);
    io::detail::write_file(a.work / "config.txt", dump_config(cfg));
    train::Trainer tr(cfg.train, cfg.model, a.work);
    train::RunOptions opts;
    opts.stop_after = a.stop_after;
    for (auto s : stages) {
        const auto rep = tr.run(s, cases, opts);
        std::ostringstream os;
        os << train::stage_name(s) << ": ";
        if (rep.already_complete)
            os << "already complete";
        else
            os << (rep.resumed ? "resumed at " : "started at ") << rep.start_iteration << ", reached "
               << rep.end_iteration << "/" << rep.total << ", last loss " << detail::fmt(rep.last_loss);
        log.info(os.str());
        if (!rep.complete) {
            log.info("stopped before completion; rerun to resume");
            break;
        }
    }
}

struct InferArgs {
    fs::path manifest, coarse, fine, out;
    std::string split;
    bool overlays = false;
    std::size_t jobs = 1;
};

/// Runs `work(i)` for i in [0, n) on `jobs` threads.
inline void parallel_cases(std::size_t n, std::size_t jobs, const std::function<void(std::size_t)>& work) {
    jobs = std::max<std::size_t>(1, std::min(jobs, n));
    if (jobs == 1) {
        for (std::size_t i = 0; i < n; ++i) work(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < jobs; ++t)
        pool.emplace_back([&] {
            for (std::size_t i; (i = next++) < n;) work(i);
        });
    for (auto& th : pool) th.join();
}

/// Returns the exit code: failures are logged per case and the run continues.
inline int cmd_infer(const InferArgs& a, const RunConfig& cfg, Log& log) {
    const auto manifest = io::read_manifest(a.manifest);
    const auto entries = manifest.split(a.split);
    const auto coarse_ck = io::load(a.coarse);
    const auto fine_ck = io::load(a.fine);
    train::load_coarse<float>(coarse_ck);  // reject unusable checkpoints before any case runs
    train::load_hybrid<float>(fine_ck);
    fs::create_directories(a.out);

    std::vector<int> status(entries.size(), kOk);
    const std::size_t jobs = std::max<std::size_t>(1, std::min(a.jobs, entries.size()));
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        // each worker owns its models; weights are only read
        auto coarse = train::load_coarse<float>(coarse_ck);
        auto fine = train::load_hybrid<float>(fine_ck);
        for (std::size_t i; (i = next++) < entries.size();) {
            const auto& e = *entries[i];
            try {
                const io::Volume image = io::read_volume(e.image);
                const auto r = pipeline::infer_case(*coarse, *fine, image, cfg.preprocess, cfg.infer);
                io::write_volume(r.labels, a.out / (e.id + ".hdr"));
                if (a.overlays) write_overlays(image, r.labels, a.out / "overlays" / e.id, cfg.preprocess);
                log.info(e.id + ": done" + (r.roi_fallback ? " (no liver found, whole volume used)" : ""));
            } catch (const NumericError& ex) {
                status[i] = kNumeric;
                log.error(e.id + ": " + ex.what());
            } catch (const std::exception& ex) {
                status[i] = kData;
                log.error(e.id + ": " + ex.what());
            }
        }
    };
    if (jobs == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (std::size_t t = 0; t < jobs; ++t) pool.emplace_back(worker);
        for (auto& th : pool) th.join();
    }
    const auto failed = std::size_t(std::count_if(status.begin(), status.end(), [](int s) { return s != kOk; }));
    log.info("inferred " + std::to_string(entries.size() - failed) + "/" + std::to_string(entries.size()) + " cases");
    if (failed == 0) return kOk;
    return std::find(status.begin(), status.end(), kNumeric) != status.end() ? kNumeric : kData;
}

struct EvalArgs {
    fs::path pred, manifest, out;
    std::string split;
    std::size_t jobs = 1;
};

/// Writes the report; returns nonzero when any case could not be evaluated.
inline int cmd_eval(const EvalArgs& a, Log& log) {
    const auto manifest = io::read_manifest(a.manifest);
    std::vector<const io::ManifestEntry*> entries;
    for (auto* e : manifest.split(a.split))
        if (!e->label.empty()) entries.push_back(e);
    std::vector<std::optional<metrics::CaseRecord>> records(entries.size());
    std::vector<std::string> errors(entries.size());
    parallel_cases(entries.size(), a.jobs, [&](std::size_t i) {
        const auto& e = *entries[i];
        try {
            const auto truth = io::read_volume(e.label);
            const auto pred = io::read_volume(a.pred / (e.id + ".hdr"));
            if (!truth.same_grid(pred)) {
                auto ext = [](const io::Volume& v) {
                    return std::to_string(v.extents[0]) + "x" + std::to_string(v.extents[1]) + "x" +
                           std::to_string(v.extents[2]);
                };
                errors[i] = "shape mismatch: prediction " + ext(pred) + ", truth " + ext(truth);
                return;
            }
            records[i] = metrics::evaluate_case(e.id, truth, pred);
        } catch (const std::exception& ex) {
            errors[i] = ex.what();
        }
    });
    metrics::MetricsReport report;
    for (std::size_t i = 0; i < entries.size(); ++i) {
        if (records[i]) report.cases.push_back(std::move(*records[i]));
        if (!errors[i].empty()) {
            report.errors.push_back({entries[i]->id, errors[i]});
            log.error(entries[i]->id + ": " + errors[i]);
        }
    }
    if (!a.out.parent_path().empty()) fs::create_directories(a.out.parent_path());
    io::detail::write_file(a.out, report.to_json().dump(2) + "\n");
    log.info("evaluated " + std::to_string(report.cases.size()) + "/" + std::to_string(entries.size()) +
             " cases, report " + a.out.string());
    return report.errors.empty() ? kOk : kData;
}

// ---------------------------------------------------------------------------
// entry point

inline int run(const std::vector<std::string>& args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    CLI::App app{"H-DenseUNet liver and tumor segmentation"};
    app.name("hdu");
    app.require_subcommand(1);

    std::string config_file;
    std::vector<std::string> overrides;
    auto add_config = [&](CLI::App* sub) {
        sub->add_option("--config", config_file, "Configuration file (key = value lines)");
        sub->add_option("--set", overrides, "Override one configuration key, KEY=VALUE")->allow_extra_args(false);
    };

    std::size_t n_phantoms = 0, holdout = 0;
    fs::path phantom_out;
    auto* phantom = app.add_subcommand("phantom", "Generate synthetic phantom cases and a manifest");
    phantom->add_option("-n,--count", n_phantoms, "Number of cases")->required();
    phantom->add_option("-o,--out", phantom_out, "Output directory")->required();
    phantom->add_option("--holdout", holdout, "Mark the last N cases as split 'test'");
    add_config(phantom);

    TrainArgs ta;
    std::size_t stop_after = 0;
    auto* train_cmd = app.add_subcommand("train", "Run training stages (resumes from checkpoints)");
    train_cmd->add_option("-m,--manifest", ta.manifest, "Case manifest")->required();
    train_cmd->add_option("-w,--work", ta.work, "Directory for checkpoints and the loss trace")->required();
    train_cmd->add_option("-s,--stage", ta.stages, "Stage name, comma-separated list, or 'all'");
    train_cmd->add_option("--split", ta.split, "Manifest split used for training");
    auto* stop_opt = train_cmd->add_option("--stop-after", stop_after, "Stop each stage after N steps (no checkpoint)");
    add_config(train_cmd);

    InferArgs ia;
    fs::path infer_work;
    auto* infer = app.add_subcommand("infer", "Segment every case of a manifest");
    infer->add_option("-m,--manifest", ia.manifest, "Case manifest")->required();
    infer->add_option("-o,--out", ia.out, "Output directory for label volumes")->required();
    infer->add_option("-w,--work", infer_work, "Training directory holding coarse.ckpt and joint.ckpt");
    infer->add_option("--coarse", ia.coarse, "Coarse localizer checkpoint");
    infer->add_option("--fine", ia.fine, "Hybrid model checkpoint");
    infer->add_option("--split", ia.split, "Only cases of this split");
    infer->add_flag("--overlays", ia.overlays, "Write per-slice PNG overlays");
    infer->add_option("-j,--jobs", ia.jobs, "Cases processed concurrently")->check(CLI::PositiveNumber);
    add_config(infer);

    EvalArgs ea;
    auto* eval = app.add_subcommand("eval", "Score predictions against a manifest's labels");
    eval->add_option("-p,--pred", ea.pred, "Directory of predicted label volumes")->required();
    eval->add_option("-m,--manifest", ea.manifest, "Manifest with ground truth")->required();
    eval->add_option("-o,--out", ea.out, "Report path (JSON)")->required();
    eval->add_option("--split", ea.split, "Only cases of this split");
    eval->add_option("-j,--jobs", ea.jobs, "Cases processed concurrently")->check(CLI::PositiveNumber);

    auto* dump = app.add_subcommand("dump-config", "Print every configuration key with its value");
    add_config(dump);

    std::vector<std::string> rev(args.rbegin(), args.rend());
    try {
        app.parse(std::move(rev));
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? kOk : kUsage;
    }

    Log log(out, err);
    try {
        if (*eval) return cmd_eval(ea, log);
        const RunConfig cfg = load_run_config(config_file, overrides);
        if (*dump) {
            out << dump_config(cfg);
            return kOk;
        }
        if (*phantom) {
            cmd_phantom(n_phantoms, phantom_out, cfg, holdout, log);
            return kOk;
        }
        if (*train_cmd) {
            if (*stop_opt) ta.stop_after = stop_after;
            cmd_train(ta, cfg, log);
            return kOk;
        }
        if (*infer) {
            if (ia.coarse.empty() || ia.fine.empty()) {
                if (infer_work.empty()) throw UsageError("infer needs --work or both --coarse and --fine");
                if (ia.coarse.empty()) ia.coarse = infer_work / "coarse.ckpt";
                if (ia.fine.empty()) ia.fine = infer_work / "joint.ckpt";
            }
            return cmd_infer(ia, cfg, log);
        }
    } catch (const UsageError& e) {
        log.error(e.what());
        return kUsage;
    } catch (const NumericError& e) {
        log.error(e.what());
        return kNumeric;
    } catch (const std::exception& e) {
        log.error(e.what());
        return kData;
    }
    return kUsage;
}

inline int run(int argc, char** argv) {
    std::vector<std::string> args;
    for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
    return run(args);
}

}  // namespace hdu::cli
