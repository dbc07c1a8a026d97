#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <set>

#include "hdu/cli.hpp"

using namespace hdu;
namespace fs = std::filesystem;

namespace {

struct Result {
    int code;
    std::string out, err;
};

Result hdu_run(std::vector<std::string> args) {
    std::ostringstream out, err;
    const int code = cli::run(args, out, err);
    return {code, out.str(), err.str()};
}

fs::path fresh_dir(const std::string& name) {
    auto d = fs::temp_directory_path() / ("hdu_cli_" + name);
    fs::remove_all(d);
    return d;
}

std::string slurp(const fs::path& p) { return io::detail::read_file(p); }

std::map<std::string, std::string> parse_dump(const std::string& text) {
    std::map<std::string, std::string> kv;
    std::istringstream is(text);
    for (std::string line; std::getline(is, line);) {
        const auto eq = line.find(" = ");
        if (eq != std::string::npos) kv[line.substr(0, eq)] = line.substr(eq + 3);
    }
    return kv;
}

std::vector<std::string> small_phantoms() {
    return {"--set", "phantom.extents=64,64,8"};
}

std::vector<std::string> tiny_training() {
    return {"--set", "train.iters_coarse=20",    "--set", "train.iters_stage2d=4", "--set", "train.iters_stage3d_hff=1",
            "--set", "train.iters_joint=1",      "--set", "train.batch_2d=2",      "--set", "train.checkpoint_every=2",
            "--set", "train.warmup_fraction=0.5"};
}

template <class... V>
std::vector<std::string> cat(std::vector<std::string> a, const V&... rest) {
    (a.insert(a.end(), rest.begin(), rest.end()), ...);
    return a;
}

std::size_t manifest_rows(const fs::path& p) { return io::read_manifest(p).entries.size(); }

}  // namespace

TEST(Config, DefaultsMatchDocumentedValues) {
    auto r = hdu_run({"dump-config"});
    ASSERT_EQ(r.code, 0) << r.err;
    auto kv = parse_dump(r.out);
    const std::map<std::string, std::string> expected{
        {"train.lr0", "0.01"},
        {"train.decay_power", "0.9"},
        {"train.momentum", "0.9"},
        {"train.lambda", "0.5"},
        {"train.batch_2d", "4"},
        {"train.batch_3d", "1"},
        {"train.iters_stage2d", "2000"},
        {"train.warmup_fraction", "0.1"},
        {"train.class_weights", "1,3,10"},
        {"train.seed", "1"},
        {"train.augment_mirror", "true"},
        {"train.augment_scale", "true"},
        {"train.scale_min", "0.8"},
        {"train.scale_max", "1.2"},
        {"model.norm.epsilon", "1e-05"},
        {"model.norm.momentum", "0.99"},
        {"model.net2d.growth_rate", "4"},
        {"model.net2d.block_repeats", "2,2,2,2"},
        {"model.net3d.dims", "3"},
        {"infer.tau_liver", "0.5"},
        {"infer.tau_tumor", "0.5"},
        {"infer.roi_margin", "10"},
        {"infer.connectivity", "26"},
        {"infer.fill_holes", "false"},
        {"infer.tile_depth", "0"},
        {"preprocess.window_low", "-200"},
        {"preprocess.window_high", "250"},
        {"preprocess.resample", "native"},
        {"phantom.extents", "64,64,16"},
    };
    for (auto& [k, v] : expected) EXPECT_EQ(kv[k], v) << k;
    EXPECT_EQ(kv.size(), cli::detail::fields().size());
}

TEST(Config, DumpIsReadableBack) {
    cli::RunConfig c;
    cli::set_key(c, "train.lr0", "0.02");
    cli::set_key(c, "train.class_weights", "1,2,5");
    cli::set_key(c, "preprocess.resample", "1,1,2");
    cli::set_key(c, "model.net2d.growth_rate", "6");
    cli::set_key(c, "infer.fill_holes", "true");
    const std::string text = cli::dump_config(c);
    cli::RunConfig back;
    cli::apply_config_text(back, "# comment\n\n" + text);
    EXPECT_EQ(cli::dump_config(back), text);
    EXPECT_EQ(back.model.net2d.growth_rate, 6u);
    EXPECT_DOUBLE_EQ((*back.preprocess.target_spacing)[2], 2.0);
}

TEST(Config, RejectsUnknownKeysAndBadValues) {
    cli::RunConfig c;
    EXPECT_THROW(cli::set_key(c, "train.learning_rate", "0.1"), cli::UsageError);
    EXPECT_THROW(cli::set_key(c, "train.batch_2d", "-1"), cli::UsageError);
    EXPECT_THROW(cli::set_key(c, "infer.fill_holes", "yes"), cli::UsageError);
    EXPECT_THROW(cli::set_key(c, "phantom.extents", "64,64"), cli::UsageError);
    EXPECT_EQ(hdu_run({"dump-config", "--set", "nope=1"}).code, 2);
    EXPECT_EQ(hdu_run({"dump-config", "--set", "train.momentum=1.5"}).code, 2);
    EXPECT_EQ(hdu_run({"dump-config", "--set", "infer.connectivity=6"}).code, 2);
    EXPECT_EQ(hdu_run({"dump-config", "--config", "/nonexistent/cfg.txt"}).code, 2);
}

TEST(Usage, ExitCodes) {
    EXPECT_EQ(hdu_run({}).code, 2);
    EXPECT_EQ(hdu_run({"bogus"}).code, 2);
    EXPECT_EQ(hdu_run({"phantom", "-n", "2"}).code, 2);
    EXPECT_EQ(hdu_run({"--help"}).code, 0);
    EXPECT_EQ(hdu_run({"infer", "-m", "x.tsv", "-o", "out"}).code, 2);
    EXPECT_EQ(hdu_run({"train", "-m", "/nonexistent/m.tsv", "-w", "/tmp/x"}).code, 3);
}

TEST(Phantom, CountsAndDeterminism) {
    auto a = fresh_dir("ph_a"), b = fresh_dir("ph_b");
    ASSERT_EQ(hdu_run(cat({"phantom", "-n", "3", "-o", a.string(), "--holdout", "1"}, small_phantoms())).code, 0);
    ASSERT_EQ(hdu_run(cat({"phantom", "-n", "3", "-o", b.string(), "--holdout", "1"}, small_phantoms())).code, 0);
    auto m = io::read_manifest(a / "manifest.tsv");
    ASSERT_EQ(m.entries.size(), 3u);
    EXPECT_EQ(m.split("test").size(), 1u);
    EXPECT_EQ(m.entries[2].split, "test");
    EXPECT_FALSE(m.preprocessing.empty());
    std::size_t files = 0;
    for (auto& e : fs::directory_iterator(a)) {
        ++files;
        EXPECT_EQ(slurp(e.path()), slurp(b / e.path().filename())) << e.path();
    }
    EXPECT_EQ(files, 3u * 4u + 1u);
    auto labels = io::read_volume(m.entries[0].label);
    EXPECT_EQ(labels.extents, (io::Extents{64, 64, 8}));

    auto z = fresh_dir("ph_zero");
    ASSERT_EQ(hdu_run({"phantom", "-n", "0", "-o", z.string()}).code, 0);
    EXPECT_EQ(manifest_rows(z / "manifest.tsv"), 0u);
}

TEST(Train, StageOrderIsEnforced) {
    auto d = fresh_dir("order");
    ASSERT_EQ(hdu_run(cat({"phantom", "-n", "2", "-o", (d / "data").string()}, small_phantoms())).code, 0);
    auto r = hdu_run(cat({"train", "-m", (d / "data" / "manifest.tsv").string(), "-w", (d / "work").string(), "-s",
                          "stage3d_hff"},
                         small_phantoms(), tiny_training()));
    EXPECT_EQ(r.code, 3);
    EXPECT_NE(r.err.find("stage2d"), std::string::npos) << r.err;
    EXPECT_EQ(hdu_run({"train", "-m", "x", "-w", "y", "-s", "stage9"}).code, 2);
}

TEST(Train, InterruptAndResumeKeepsTraceContinuous) {
    auto d = fresh_dir("resume");
    ASSERT_EQ(hdu_run(cat({"phantom", "-n", "2", "-o", (d / "data").string()}, small_phantoms())).code, 0);
    const auto args = cat({"train", "-m", (d / "data" / "manifest.tsv").string(), "-w", (d / "work").string()},
                          tiny_training(), std::vector<std::string>{"--set", "train.iters_stage2d=8"});
    ASSERT_EQ(hdu_run(cat(args, std::vector<std::string>{"-s", "warmup2d,stage2d", "--stop-after", "5"})).code, 0);
    auto partial = train::read_trace(d / "work" / "trace.tsv");
    auto r = hdu_run(cat(args, std::vector<std::string>{"-s", "warmup2d,stage2d"}));
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_NE(r.out.find("stage2d: resumed at 4"), std::string::npos) << r.out;
    auto trace = train::read_trace(d / "work" / "trace.tsv");
    std::vector<std::size_t> iters;
    for (auto& row : trace)
        if (row.stage == "stage2d") iters.push_back(row.iteration);
    std::vector<std::size_t> expected(8);
    std::iota(expected.begin(), expected.end(), 1);
    EXPECT_EQ(iters, expected);
    EXPECT_LT(partial.size(), trace.size());
    EXPECT_TRUE(fs::exists(d / "work" / "stage2d.ckpt"));
    EXPECT_TRUE(fs::exists(d / "work" / "config.txt"));
}

/// Phantoms plus a fully trained (tiny) model chain, shared by the inference tests.
class Trained : public ::testing::Test {
protected:
    static void SetUpTestSuite() {
        root_ = fresh_dir("trained");
        ASSERT_EQ(hdu_run(cat({"phantom", "-n", "4", "-o", (root_ / "data").string(), "--holdout", "3"},
                              small_phantoms()))
                      .code,
                  0);
        auto r = hdu_run(cat({"train", "-m", manifest().string(), "-w", work().string(), "-s", "all"},
                             small_phantoms(), tiny_training()));
        ASSERT_EQ(r.code, 0) << r.err;
    }
    static fs::path manifest() { return root_ / "data" / "manifest.tsv"; }
    static fs::path work() { return root_ / "work"; }
    static Result infer(const fs::path& out, std::vector<std::string> extra = {}) {
        return hdu_run(cat({"infer", "-m", manifest().string(), "-w", work().string(), "-o", out.string(), "--split",
                            "test"},
                           extra));
    }
    static inline fs::path root_;
};

TEST_F(Trained, InferWritesOneLabelVolumePerCase) {
    auto out = root_ / "pred";
    auto r = infer(out, {"--overlays"});
    ASSERT_EQ(r.code, 0) << r.err;
    auto m = io::read_manifest(manifest());
    for (auto* e : m.split("test")) {
        auto v = io::read_volume(out / (e->id + ".hdr"));
        auto img = io::read_volume(e->image);
        EXPECT_EQ(v.extents, img.extents);
        EXPECT_EQ(v.dtype, io::DType::uint8);
        for (float x : v.values) ASSERT_TRUE(x == 0.0f || x == 1.0f || x == 2.0f);
        std::size_t pngs = 0;
        for (auto& f : fs::directory_iterator(out / "overlays" / e->id)) {
            ++pngs;
            EXPECT_EQ(slurp(f.path()).substr(1, 3), "PNG");
        }
        EXPECT_EQ(pngs, img.extents[2]);
    }
    EXPECT_EQ(m.split("test").size(), 3u);
}

TEST_F(Trained, InferIsByteDeterministic) {
    auto a = root_ / "det_a", b = root_ / "det_b", c = root_ / "det_c";
    ASSERT_EQ(infer(a, {"--jobs", "1"}).code, 0);
    ASSERT_EQ(infer(b, {"--jobs", "1"}).code, 0);
    ASSERT_EQ(infer(c, {"--jobs", "2"}).code, 0);
    for (auto& f : fs::directory_iterator(a)) {
        EXPECT_EQ(slurp(f.path()), slurp(b / f.path().filename()));
        EXPECT_EQ(slurp(f.path()), slurp(c / f.path().filename()));
    }
}

TEST_F(Trained, InferContinuesPastFailedCases) {
    auto m = io::read_manifest(manifest());
    m.entries.push_back({"missing", root_ / "data" / "missing.hdr", {}, "test"});
    auto path = root_ / "data" / "with_missing.tsv";
    io::write_manifest(m, path);
    auto out = root_ / "pred_partial";
    auto r = hdu_run({"infer", "-m", path.string(), "-w", work().string(), "-o", out.string(), "--split", "test"});
    EXPECT_EQ(r.code, 3);
    EXPECT_NE(r.err.find("missing"), std::string::npos);
    for (auto* e : m.split("test")) EXPECT_EQ(fs::exists(out / (e->id + ".hdr")), e->id != "missing") << e->id;
}

TEST_F(Trained, EvalOfTruthIsPerfect) {
    auto m = io::read_manifest(manifest());
    auto pred = root_ / "truth_copy";
    fs::create_directories(pred);
    for (auto& e : m.entries) io::write_volume(io::read_volume(e.label), pred / (e.id + ".hdr"));
    auto report = root_ / "report.json";
    auto r = hdu_run({"eval", "-p", pred.string(), "-m", manifest().string(), "-o", report.string()});
    ASSERT_EQ(r.code, 0) << r.err;
    auto j = nlohmann::json::parse(slurp(report));
    EXPECT_EQ(j["cases"].size(), 2 * m.entries.size());
    for (auto& row : j["cases"]) {
        EXPECT_EQ(row["dice"].get<double>(), 1.0);
        EXPECT_EQ(row["voe"].get<double>(), 0.0);
    }
    EXPECT_EQ(j["global"]["tumor_burden_rmse"].get<double>(), 0.0);
    EXPECT_TRUE(j["errors"].empty());
}

TEST_F(Trained, EvalReportSchemaAndConventions) {
    auto m = io::read_manifest(manifest());
    auto pred = root_ / "empty_pred";
    fs::create_directories(pred);
    for (auto& e : m.entries) {
        auto t = io::read_volume(e.label);
        std::fill(t.values.begin(), t.values.end(), 0.0f);
        io::write_volume(t, pred / (e.id + ".hdr"));
    }
    auto report = root_ / "empty.json";
    ASSERT_EQ(hdu_run({"eval", "-p", pred.string(), "-m", manifest().string(), "-o", report.string()}).code, 0);
    auto j = nlohmann::json::parse(slurp(report));
    std::set<std::string> top, row_keys;
    for (auto& [k, v] : j.items()) top.insert(k);
    EXPECT_EQ(top, (std::set<std::string>{"cases", "global", "errors"}));
    for (auto& [k, v] : j["cases"][0].items()) row_keys.insert(k);
    EXPECT_EQ(row_keys, (std::set<std::string>{"case_id", "structure", "dice", "voe", "rvd", "asd_mm", "rmsd_mm",
                                                "tumor_burden_pred", "tumor_burden_true", "undefined"}));
    std::size_t nonempty_truth = 0;
    for (auto& row : j["cases"]) {
        // some short phantoms hold no tumor; both masks are then empty
        if (row["structure"] == "tumor" && row["tumor_burden_true"].get<double>() == 0.0) continue;
        ++nonempty_truth;
        EXPECT_EQ(row["dice"].get<double>(), 0.0);
        EXPECT_EQ(row["rvd"].get<double>(), -1.0);
        EXPECT_TRUE(row["asd_mm"].is_null());
        EXPECT_TRUE(row["rmsd_mm"].is_null());
    }
    EXPECT_GE(nonempty_truth, m.entries.size());
    EXPECT_TRUE(j["global"].contains("liver"));
    EXPECT_TRUE(j["global"]["liver"].contains("dice_global"));
    EXPECT_TRUE(j["global"]["liver"].contains("dice_per_case_mean"));
}

TEST_F(Trained, EvalFlagsShapeMismatch) {
    auto m = io::read_manifest(manifest());
    auto pred = root_ / "bad_pred";
    fs::create_directories(pred);
    for (std::size_t i = 0; i < m.entries.size(); ++i) {
        auto t = io::read_volume(m.entries[i].label);
        if (i == 0) t = io::Volume::make({8, 8, 8}, t.spacing, io::DType::uint8);
        io::write_volume(t, pred / (m.entries[i].id + ".hdr"));
    }
    auto report = root_ / "bad.json";
    auto r = hdu_run({"eval", "-p", pred.string(), "-m", manifest().string(), "-o", report.string()});
    EXPECT_EQ(r.code, 3);
    auto j = nlohmann::json::parse(slurp(report));
    ASSERT_EQ(j["errors"].size(), 1u);
    EXPECT_EQ(j["errors"][0]["case_id"], m.entries[0].id);
    EXPECT_NE(j["errors"][0]["message"].get<std::string>().find("shape mismatch"), std::string::npos);
    EXPECT_EQ(j["cases"].size(), 2 * (m.entries.size() - 1));
}
