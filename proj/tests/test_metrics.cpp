#include <gtest/gtest.h>

#include <random>

#include "bigl/metrics.hpp"
#include "oracles.hpp"

using namespace bigl;

namespace {

BinaryMask mask2d(std::int64_t h, std::int64_t w, std::initializer_list<std::pair<int, int>> on) {
    BinaryMask m(1, h, w, 0);
    for (auto [y, x] : on) m(0, y, x) = 1;
    return m;
}

oracle::Mask3 to_oracle(const BinaryMask& m) {
    oracle::Mask3 o{static_cast<int>(m.depth()), static_cast<int>(m.height()), static_cast<int>(m.width()), {}};
    for (auto v : m.values()) o.v.push_back(v);
    return o;
}

/// Random blobby mask: a few filled rectangles.
BinaryMask random_mask(std::mt19937_64& rng, std::int64_t d, std::int64_t h, std::int64_t w) {
    BinaryMask m(d, h, w, 0);
    const int rects = 1 + static_cast<int>(rng() % 3);
    for (int r = 0; r < rects; ++r) {
        const auto z0 = static_cast<std::int64_t>(rng() % d), y0 = static_cast<std::int64_t>(rng() % h),
                   x0 = static_cast<std::int64_t>(rng() % w);
        const auto dz = 1 + static_cast<std::int64_t>(rng() % d), dy = 1 + static_cast<std::int64_t>(rng() % 6),
                   dx = 1 + static_cast<std::int64_t>(rng() % 6);
        for (auto z = z0; z < std::min(d, z0 + dz); ++z)
            for (auto y = y0; y < std::min(h, y0 + dy); ++y)
                for (auto x = x0; x < std::min(w, x0 + dx); ++x) m(z, y, x) = 1;
    }
    // Speckle so borders are irregular.
    for (int i = 0; i < 4; ++i) m.values()[rng() % m.size()] = 1;
    return m;
}

ClassVolume classes(std::int64_t h, std::int64_t w, std::vector<std::int32_t> v) {
    ClassVolume c(1, h, w, 0);
    c.values() = std::move(v);
    return c;
}

std::size_t count(const BinaryMask& m) {
    std::size_t n = 0;
    for (auto v : m.values()) n += v != 0;
    return n;
}

}  // namespace

TEST(ComposeRegions, BratsOnePixelPerClass) {
    const auto r = compose_regions(classes(2, 2, {0, 1, 2, 3}), LabelScheme::Brats);
    EXPECT_EQ(count(r.at("WT")), 3u);
    EXPECT_EQ(count(r.at("TC")), 2u);
    EXPECT_EQ(count(r.at("ET")), 1u);
    EXPECT_EQ(r.at("ET")(0, 1, 1), 1);
    EXPECT_EQ(r.at("TC")(0, 1, 0), 0);
}

TEST(ComposeRegions, BackgroundGivesEmptyRegions) {
    for (const auto& [name, m] : compose_regions(ClassVolume(2, 3, 3, 0), LabelScheme::Brats)) {
        EXPECT_EQ(count(m), 0u) << name;
    }
}

TEST(ComposeRegions, CardiacSingletons) {
    const auto r = compose_regions(classes(1, 5, {0, 1, 2, 3, 4}), LabelScheme::Cardiac);
    ASSERT_EQ(r.size(), 4u);
    EXPECT_EQ(r.at("AA")(0, 0, 1), 1);
    EXPECT_EQ(r.at("LAC")(0, 0, 2), 1);
    EXPECT_EQ(r.at("LVC")(0, 0, 3), 1);
    EXPECT_EQ(r.at("MYO")(0, 0, 4), 1);
    for (const auto& [name, m] : r) EXPECT_EQ(count(m), 1u) << name;
}

TEST(ComposeRegions, OutOfSchemeClassRejected) {
    EXPECT_THROW(compose_regions(classes(1, 2, {0, 4}), LabelScheme::Brats), LabelSchemeViolation);
    EXPECT_THROW(compose_regions(LabelMask{Grid2D<std::int32_t>(2, 2, 0), 5, {}}, LabelScheme::Brats),
                 LabelSchemeViolation);
}

TEST(ComposeRegions, NestedContainmentOnRandomMasks) {
    std::mt19937_64 rng(3);
    for (int trial = 0; trial < 100; ++trial) {
        ClassVolume c(2, 8, 8, 0);
        for (auto& v : c.values()) v = static_cast<std::int32_t>(rng() % 4);
        const auto r = compose_regions(c, LabelScheme::Brats);
        for (std::size_t i = 0; i < c.size(); ++i) {
            EXPECT_LE(r.at("ET").values()[i], r.at("TC").values()[i]);
            EXPECT_LE(r.at("TC").values()[i], r.at("WT").values()[i]);
        }
    }
}

TEST(Dice, WorkedValues) {
    const auto p = mask2d(4, 4, {{0, 0}, {0, 1}, {1, 0}, {1, 1}});
    const auto g = mask2d(4, 4, {{0, 0}, {0, 1}, {1, 0}, {2, 0}, {2, 1}, {3, 3}});
    EXPECT_DOUBLE_EQ(dice(p, g), 0.6);
    EXPECT_DOUBLE_EQ(dice(p, p), 1.0);
    EXPECT_DOUBLE_EQ(dice(p, mask2d(4, 4, {{3, 3}})), 0.0);
    EXPECT_DOUBLE_EQ(dice(BinaryMask(1, 4, 4, 0), BinaryMask(1, 4, 4, 0)), 1.0);
    EXPECT_THROW(dice(p, BinaryMask(1, 4, 5, 0)), ShapeMismatch);
}

TEST(Dice, GrowingTowardGroundTruthNeverDecreases) {
    BinaryMask gt(1, 16, 16, 0);
    for (int y = 3; y < 13; ++y)
        for (int x = 3; x < 13; ++x) gt(0, y, x) = 1;
    double prev = 0.0;
    for (int r = 0; r <= 5; ++r) {
        BinaryMask pred(1, 16, 16, 0);
        for (int y = 8 - r; y < 8 + r; ++y)
            for (int x = 8 - r; x < 8 + r; ++x) pred(0, y, x) = 1;
        const double d = dice(pred, gt);
        EXPECT_GE(d, prev);
        prev = d;
    }
    EXPECT_DOUBLE_EQ(prev, 1.0);
}

TEST(SurfaceDistances, SinglePixelsThreeApart) {
    const auto a = mask2d(5, 8, {{2, 1}}), b = mask2d(5, 8, {{2, 4}});
    const auto d = surface_distances(a, b, Spacing3{1.0, 1.0, 1.0});
    EXPECT_EQ(d.pred_to_gt, std::vector<double>{3.0});
    EXPECT_EQ(d.gt_to_pred, std::vector<double>{3.0});
    const auto scaled = surface_distances(a, b, Spacing3{1.0, 1.0, 2.0});
    EXPECT_EQ(scaled.pred_to_gt, std::vector<double>{6.0});
    EXPECT_EQ(scaled.gt_to_pred, std::vector<double>{6.0});
}

TEST(SurfaceDistances, Grid2DOverloadUsesInPlaneSpacing) {
    Grid2D<std::uint8_t> a(4, 4, 0), b(4, 4, 0);
    a(0, 0) = 1;
    b(3, 0) = 1;
    EXPECT_DOUBLE_EQ(hd95(a, b, Spacing{2.0, 1.0}), 6.0);
}

TEST(SurfaceDistances, IdenticalMasksAllZero) {
    std::mt19937_64 rng(4);
    const auto m = random_mask(rng, 1, 16, 16);
    for (double v : surface_distances(m, m, Spacing3{}).pooled()) EXPECT_EQ(v, 0.0);
    EXPECT_EQ(hd95(m, m, Spacing3{}), 0.0);
    EXPECT_EQ(asd(m, m, Spacing3{}), 0.0);
}

TEST(SurfaceDistances, EmptySideIsReported) {
    const auto some = mask2d(4, 4, {{1, 1}});
    const BinaryMask none(1, 4, 4, 0);
    try {
        surface_distances(none, some, Spacing3{});
        FAIL();
    } catch (const UndefinedDistance& e) {
        EXPECT_EQ(e.side(), UndefinedDistance::Side::Prediction);
    }
    try {
        surface_distances(some, none, Spacing3{});
        FAIL();
    } catch (const UndefinedDistance& e) {
        EXPECT_EQ(e.side(), UndefinedDistance::Side::GroundTruth);
    }
}

TEST(Hd95AndAsd, SinglePixelsFiveMillimetresApart) {
    const auto a = mask2d(8, 8, {{1, 1}}), b = mask2d(8, 8, {{4, 5}});
    EXPECT_DOUBLE_EQ(hd95(a, b, Spacing3{}), 5.0);
    EXPECT_DOUBLE_EQ(asd(a, b, Spacing3{}), 5.0);
}

TEST(Percentile, LinearInterpolationOnExplicitList) {
    std::vector<double> v(20, 0.0);
    v.back() = 10.0;
    // Position 0.95 * 19 = 18.05, between the last zero and the 10.
    const double p = percentile(v, 95.0);
    EXPECT_NEAR(p, 0.5, 1e-12);
    EXPECT_NEAR(p, oracle::percentile_linear(v, 95.0), 1e-12);
    EXPECT_EQ(percentile({7.0}, 95.0), 7.0);
    EXPECT_EQ(percentile({1.0, 2.0, 3.0}, 0.0), 1.0);
    EXPECT_EQ(percentile({1.0, 2.0, 3.0}, 100.0), 3.0);
    EXPECT_THROW(percentile({}, 50.0), ConfigError);
}

TEST(MetricOracle, RandomPlanarPairsMatchBruteForce) {
    std::mt19937_64 rng(2024);
    for (int trial = 0; trial < 100; ++trial) {
        const auto p = random_mask(rng, 1, 16, 16), g = random_mask(rng, 1, 16, 16);
        const double sy = 0.5 + (rng() % 4) * 0.25, sx = 0.5 + (rng() % 4) * 0.25;
        const Spacing3 sp{1.0, sy, sx};
        const auto op = to_oracle(p), og = to_oracle(g);
        std::vector<int> pv(op.v.begin(), op.v.end()), gv(og.v.begin(), og.v.end());
        EXPECT_EQ(dice(p, g), oracle::dice_count(pv, gv));
        const auto ref = oracle::pooled_distances(op, og, 1.0, sy, sx);
        EXPECT_NEAR(hd95(p, g, sp), oracle::percentile_linear(ref, 95.0), 1e-9);
        EXPECT_NEAR(asd(p, g, sp), oracle::mean_of(ref), 1e-9);
        // Symmetry of every metric under argument swap.
        EXPECT_EQ(dice(p, g), dice(g, p));
        EXPECT_NEAR(hd95(p, g, sp), hd95(g, p, sp), 1e-12);
        EXPECT_NEAR(asd(p, g, sp), asd(g, p, sp), 1e-12);
    }
}

TEST(MetricOracle, RandomVolumesMatchBruteForce) {
    std::mt19937_64 rng(77);
    for (int trial = 0; trial < 30; ++trial) {
        const auto p = random_mask(rng, 4, 12, 12), g = random_mask(rng, 4, 12, 12);
        const Spacing3 sp{2.5, 0.75, 1.25};
        const auto ref = oracle::pooled_distances(to_oracle(p), to_oracle(g), 2.5, 0.75, 1.25);
        EXPECT_NEAR(hd95(p, g, sp), oracle::percentile_linear(ref, 95.0), 1e-9);
        EXPECT_NEAR(asd(p, g, sp), oracle::mean_of(ref), 1e-9);
    }
}

TEST(MetricOracle, StrictSubsetAsd) {
    BinaryMask big(1, 10, 10, 0), small(1, 10, 10, 0);
    for (int y = 1; y < 9; ++y)
        for (int x = 1; x < 9; ++x) big(0, y, x) = 1;
    for (int y = 4; y < 6; ++y)
        for (int x = 4; x < 6; ++x) small(0, y, x) = 1;
    const auto ref = oracle::pooled_distances(to_oracle(small), to_oracle(big), 1, 1, 1);
    EXPECT_NEAR(asd(small, big, Spacing3{}), oracle::mean_of(ref), 1e-12);
}

TEST(Aggregate, PopulationStdAndPercentScale) {
    MetricsReport r;
    r.regions = {"WT"};
    r.cases = {{"b", "WT", 0.8, 2.0, 1.0}, {"a", "WT", 0.6, 4.0, 3.0}};
    aggregate(r);
    EXPECT_EQ(r.n_cases, 2u);
    EXPECT_NEAR(r.summary.at("WT").dsc_mean, 70.0, 1e-9);
    EXPECT_NEAR(r.summary.at("WT").dsc_std, 10.0, 1e-9);
    EXPECT_NEAR(*r.summary.at("WT").hd95_mean, 3.0, 1e-12);
    EXPECT_EQ(r.cases.front().case_id, "a");
    EXPECT_EQ(format_mean_std(r.summary.at("WT").dsc_mean, r.summary.at("WT").dsc_std), "70.00$\\pm$10.00");
}

TEST(Aggregate, UndefinedDistancesExcludedAndFormattedAsNA) {
    MetricsReport r;
    r.regions = {"ET"};
    r.cases = {{"a", "ET", 0.0, std::nullopt, std::nullopt}};
    aggregate(r);
    EXPECT_FALSE(r.summary.at("ET").hd95_mean.has_value());
    EXPECT_EQ(format_optional(r.summary.at("ET").hd95_mean, r.summary.at("ET").hd95_std), "N/A");
    EXPECT_EQ(format_optional(1.234, 0.5), "1.23$\\pm$0.50");
}

TEST(Aggregate, SummaryRecomputableFromCaseRows) {
    std::mt19937_64 rng(8);
    MetricsReport r;
    r.regions = {"WT", "TC"};
    for (int i = 0; i < 9; ++i) {
        for (const auto& reg : r.regions) {
            r.cases.push_back({"c" + std::to_string(i), reg, (rng() % 1000) / 1000.0, (rng() % 100) / 7.0,
                               (rng() % 100) / 9.0});
        }
    }
    aggregate(r);
    for (const auto& reg : r.regions) {
        std::vector<double> d;
        for (const auto& c : r.cases)
            if (c.region == reg) d.push_back(100.0 * c.dsc);
        const double m = oracle::mean_of(d);
        double var = 0.0;
        for (double x : d) var += (x - m) * (x - m) / d.size();
        EXPECT_NEAR(r.summary.at(reg).dsc_mean, m, 1e-9);
        EXPECT_NEAR(r.summary.at(reg).dsc_std, std::sqrt(var), 1e-9);
    }
}

TEST(CaseMetrics, SelfEvaluationIsPerfect) {
    std::mt19937_64 rng(9);
    ClassVolume c(3, 16, 16, 0);
    for (int z = 0; z < 3; ++z)
        for (int y = 4; y < 12; ++y)
            for (int x = 4; x < 12; ++x) c(z, y, x) = 1 + static_cast<std::int32_t>(rng() % 3);
    const auto rows = case_metrics("k", c, c, LabelScheme::Brats, Spacing3{2.0, 1.0, 1.0});
    ASSERT_EQ(rows.size(), 3u);
    for (const auto& row : rows) {
        EXPECT_EQ(row.dsc, 1.0);
        EXPECT_EQ(*row.hd95, 0.0);
        EXPECT_EQ(*row.asd, 0.0);
    }
}

TEST(CaseMetrics, EmptyPredictionListsUndefinedRows) {
    ClassVolume gt(1, 8, 8, 0);
    gt(0, 3, 3) = 3;
    std::vector<UndefinedCase> undefined;
    const auto rows = case_metrics("k", ClassVolume(1, 8, 8, 0), gt, LabelScheme::Brats, Spacing3{}, &undefined);
    for (const auto& row : rows) {
        EXPECT_EQ(row.dsc, 0.0);
        EXPECT_FALSE(row.hd95.has_value());
    }
    EXPECT_EQ(undefined.size(), 3u);
    EXPECT_EQ(undefined.front().case_id, "k");
}
