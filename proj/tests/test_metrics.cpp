#include <gtest/gtest.h>

#include <random>

#include "hdu/metrics.hpp"
#include "oracles.hpp"

using namespace hdu;
using namespace hdu::metrics;

namespace {

Mask from_grid(const oracle::Grid& g) {
    return {Extents{std::size_t(g.X), std::size_t(g.Y), std::size_t(g.Z)}, g.v};
}

Mask with_voxels(Extents e, const std::vector<std::array<std::size_t, 3>>& vox) {
    Mask m = Mask::empty(e);
    for (auto& p : vox) m.v[m.index(p[0], p[1], p[2])] = 1;
    return m;
}

Mask box(Extents e, std::array<std::size_t, 3> lo, std::array<std::size_t, 3> hi) {
    Mask m = Mask::empty(e);
    for (std::size_t z = lo[2]; z <= hi[2]; ++z)
        for (std::size_t y = lo[1]; y <= hi[1]; ++y)
            for (std::size_t x = lo[0]; x <= hi[0]; ++x) m.v[m.index(x, y, z)] = 1;
    return m;
}

io::Volume label_volume(Extents e, std::vector<float> values) {
    io::Volume v = io::Volume::make(e, {1, 1, 1}, io::DType::uint8);
    v.values = std::move(values);
    return v;
}

}  // namespace

TEST(Dice, Examples) {
    const Extents e{4, 4, 4};
    auto a = box(e, {0, 0, 0}, {1, 1, 1});
    EXPECT_EQ(dice(a, a), 1.0);
    EXPECT_EQ(dice(a, box(e, {2, 2, 2}, {3, 3, 3})), 0.0);
    EXPECT_EQ(dice(a, box(e, {1, 0, 0}, {2, 1, 1})), 0.5);  // 8 and 8 voxels sharing 4
    EXPECT_EQ(dice(Mask::empty(e), Mask::empty(e)), 1.0);
    EXPECT_THROW(dice(a, Mask::empty({4, 4, 3})), std::invalid_argument);
}

TEST(Overlap, VoeAndRvdExamples) {
    // |A| = 100, |B| = 110, |A n B| = 90
    const Extents e{20, 20, 1};
    Mask a = Mask::empty(e), b = Mask::empty(e);
    for (std::size_t i = 0; i < 100; ++i) a.v[i] = 1;
    for (std::size_t i = 10; i < 120; ++i) b.v[i] = 1;
    EXPECT_DOUBLE_EQ(voe(a, b), 0.25);
    EXPECT_DOUBLE_EQ(*rvd(a, b), 0.1);
    EXPECT_EQ(voe(a, a), 0.0);
    EXPECT_EQ(*rvd(a, a), 0.0);
    EXPECT_EQ(voe(a, Mask::empty(e)), 1.0);
    EXPECT_EQ(*rvd(a, Mask::empty(e)), -1.0);
    EXPECT_FALSE(rvd(Mask::empty(e), a));
}

TEST(Dice, AggregatePerCaseVersusGlobal) {
    // case 1: perfect on 10 voxels; case 2: disjoint, 1000 voxels each side
    std::vector<Overlap> cases{{10, 10, 10}, {1000, 1000, 0}};
    auto agg = dice_aggregate(cases);
    EXPECT_DOUBLE_EQ(agg.dice_per_case_mean, 0.5);
    EXPECT_DOUBLE_EQ(agg.dice_global, 2.0 * 10 / (1010 + 1010));
    std::swap(cases[0], cases[1]);
    auto swapped = dice_aggregate(cases);
    EXPECT_EQ(swapped.dice_global, agg.dice_global);
    EXPECT_EQ(swapped.dice_per_case_mean, agg.dice_per_case_mean);
    auto one = dice_aggregate({{5, 7, 3}});
    EXPECT_EQ(one.dice_global, one.dice_per_case_mean);
    EXPECT_THROW(dice_aggregate({}), std::invalid_argument);
}

TEST(Surface, Examples) {
    const Extents e{5, 5, 5};
    auto single = with_voxels(e, {{2, 2, 2}});
    EXPECT_EQ(surface_voxels(single).v, single.v);
    auto cube = box(e, {1, 1, 1}, {3, 3, 3});
    auto s = surface_voxels(cube);
    EXPECT_EQ(s.count(), 26u);
    EXPECT_EQ(s.v[s.index(2, 2, 2)], 0);
    EXPECT_EQ(surface_voxels(Mask::empty(e)).count(), 0u);
    // the grid border counts as background
    auto full = box(e, {0, 0, 0}, {4, 4, 4});
    EXPECT_EQ(surface_voxels(full).count(), 125u - 27u);
}

TEST(SurfaceDistance, Examples) {
    const Extents e{8, 3, 3};
    auto a = with_voxels(e, {{1, 1, 1}});
    auto b = with_voxels(e, {{4, 1, 1}});
    auto d = surface_distances(a, b, {1, 1, 1});
    ASSERT_TRUE(d);
    EXPECT_DOUBLE_EQ(d->asd_mm, 3.0);
    EXPECT_DOUBLE_EQ(d->rmsd_mm, 3.0);
    auto same = surface_distances(a, a, {1, 1, 1});
    EXPECT_EQ(same->asd_mm, 0.0);
    EXPECT_EQ(same->rmsd_mm, 0.0);
    EXPECT_FALSE(surface_distances(a, Mask::empty(e), {1, 1, 1}));
    auto aniso = surface_distances(a, b, {0.5, 1, 1});
    EXPECT_DOUBLE_EQ(aniso->asd_mm, 1.5);
}

TEST(SurfaceDistance, EdtMatchesBruteForce) {
    std::mt19937_64 rng(17);
    for (int trial = 0; trial < 30; ++trial) {
        auto g = oracle::random_grid(9, 7, 5, rng);
        const Vec3 sp{0.7, 1.3, 2.5};
        auto d2 = squared_edt(from_grid(g), sp);
        for (int z = 0; z < 5; ++z)
            for (int y = 0; y < 7; ++y)
                for (int x = 0; x < 9; ++x) {
                    double best = std::numeric_limits<double>::infinity();
                    for (int qz = 0; qz < 5; ++qz)
                        for (int qy = 0; qy < 7; ++qy)
                            for (int qx = 0; qx < 9; ++qx)
                                if (g.at(qx, qy, qz)) {
                                    const double dx = (x - qx) * sp[0], dy = (y - qy) * sp[1], dz = (z - qz) * sp[2];
                                    best = std::min(best, dx * dx + dy * dy + dz * dz);
                                }
                    const double got = d2[std::size_t(x + 9 * (y + 7 * z))];
                    if (std::isinf(best))
                        ASSERT_TRUE(std::isinf(got));
                    else
                        ASSERT_NEAR(got, best, 1e-9);
                }
    }
}

TEST(MetricOracles, RandomPairsAgree) {
    std::mt19937_64 rng(23);
    const Vec3 sp{0.69, 0.8, 1.5};
    for (int trial = 0; trial < 60; ++trial) {
        auto ga = oracle::random_grid(12, 12, 12, rng), gb = oracle::random_grid(12, 12, 12, rng);
        auto a = from_grid(ga), b = from_grid(gb);
        EXPECT_NEAR(dice(a, b), oracle::dice(ga, gb), 1e-9);
        EXPECT_NEAR(voe(a, b), oracle::voe(ga, gb), 1e-9);
        const double dc = dice(a, b);
        EXPECT_NEAR(voe(a, b), 1.0 - dc / (2.0 - dc), 1e-12);
        if (a.count() > 0) {
            EXPECT_NEAR(*rvd(a, b), oracle::rvd(ga, gb), 1e-9);
        }
        EXPECT_EQ(surface_voxels(a).count(), oracle::surface(ga).size());
        auto sd = surface_distances(a, b, sp);
        if (a.count() && b.count()) {
            ASSERT_TRUE(sd);
            auto ref = oracle::surface_distances(ga, gb, {sp[0], sp[1], sp[2]});
            EXPECT_NEAR(sd->asd_mm, ref[0], 1e-9);
            EXPECT_NEAR(sd->rmsd_mm, ref[1], 1e-9);
            auto rev = surface_distances(b, a, sp);
            EXPECT_NEAR(rev->asd_mm, sd->asd_mm, 1e-12);
        }
    }
}

TEST(Burden, RmseExamples) {
    EXPECT_EQ(*tumor_burden_rmse({{"a", 0.1, 0.1}, {"b", 0.3, 0.3}}).rmse, 0.0);
    EXPECT_NEAR(*tumor_burden_rmse({{"a", 0.10, 0.12}}).rmse, 0.02, 1e-15);
    EXPECT_NEAR(*tumor_burden_rmse({{"a", 0.1, 0.1}, {"b", 0.12, 0.10}}).rmse, std::sqrt(0.0002), 1e-12);
    auto r = tumor_burden_rmse({{"a", std::nullopt, 0.1}, {"b", 0.2, 0.1}});
    EXPECT_EQ(r.excluded, std::vector<std::string>{"a"});
    EXPECT_NEAR(*r.rmse, 0.1, 1e-15);
    EXPECT_FALSE(tumor_burden_rmse({{"a", std::nullopt, std::nullopt}}).rmse);
}

TEST(Burden, LiverRegionIncludesTumor) {
    auto v = label_volume({4, 1, 1}, {0, 1, 2, 2});
    EXPECT_DOUBLE_EQ(*tumor_burden(liver_mask(v), tumor_mask(v)), 2.0 / 3.0);
    EXPECT_FALSE(tumor_burden(liver_mask(label_volume({2, 1, 1}, {0, 0})), Mask::empty({2, 1, 1})));
}

TEST(Report, IdentityPredictionsAndSchema) {
    auto truth = label_volume({4, 4, 1}, {0, 1, 1, 0, 1, 2, 2, 1, 1, 1, 1, 1, 0, 0, 0, 0});
    MetricsReport rep;
    rep.cases.push_back(evaluate_case("c0", truth, truth));
    auto j = rep.to_json();
    ASSERT_EQ(j["cases"].size(), 2u);
    for (auto& row : j["cases"]) {
        for (auto key : {"case_id", "structure", "dice", "voe", "rvd", "asd_mm", "rmsd_mm", "tumor_burden_pred",
                         "tumor_burden_true", "undefined"})
            EXPECT_TRUE(row.contains(key)) << key;
        EXPECT_EQ(row["dice"], 1.0);
        EXPECT_EQ(row["voe"], 0.0);
        EXPECT_TRUE(row["undefined"].empty());
    }
    EXPECT_EQ(j["global"]["tumor_burden_rmse"], 0.0);
    EXPECT_EQ(j["global"]["liver"]["dice_global"], 1.0);
    EXPECT_EQ(j["global"]["tumor"]["dice_per_case_mean"], 1.0);
}

TEST(Report, EmptyPredictionFlagsUndefined) {
    auto truth = label_volume({3, 1, 1}, {1, 2, 0});
    auto pred = label_volume({3, 1, 1}, {0, 0, 0});
    MetricsReport rep;
    rep.cases.push_back(evaluate_case("c0", truth, pred));
    auto row = rep.to_json()["cases"][0];
    EXPECT_EQ(row["dice"], 0.0);
    EXPECT_EQ(row["rvd"], -1.0);
    EXPECT_TRUE(row["asd_mm"].is_null());
    EXPECT_TRUE(row["rmsd_mm"].is_null());
    EXPECT_NE(std::find(row["undefined"].begin(), row["undefined"].end(), "asd_mm"), row["undefined"].end());
    EXPECT_TRUE(rep.to_json()["global"]["tumor_burden_rmse"].is_null());
    EXPECT_THROW(evaluate_case("bad", truth, label_volume({2, 1, 1}, {0, 0})), std::invalid_argument);
}
