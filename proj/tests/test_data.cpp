#include <gtest/gtest.h>

#include <fstream>
#include <random>
#include <set>

#include "bigl/data.hpp"
#include "bigl/metrics.hpp"
#include "oracles.hpp"

using namespace bigl;
namespace fs = std::filesystem;

namespace {

std::vector<CaseRecord> fake_cases(std::size_t n) {
    std::vector<CaseRecord> v(n);
    for (std::size_t i = 0; i < n; ++i) {
        char id[16];
        std::snprintf(id, sizeof(id), "p%04zu", i);
        v[i].case_id = id;
    }
    return v;
}

Volume<double> filled_volume(std::int64_t d, std::int64_t h, std::int64_t w, std::uint64_t seed) {
    Volume<double> v(d, h, w, 0.0);
    v.values() = oracle::random_values(v.size(), seed, 0.1, 1.0);
    return v;
}

/// Writes a case with both modalities and, optionally, a label volume.
void write_case(const fs::path& root, const std::string& id, std::int64_t d, std::int64_t h, bool label = true,
                std::int64_t b_height = -1) {
    const auto dir = root / id;
    fs::create_directories(dir);
    write_volume(dir / kModalityA, filled_volume(d, h, h, 1), {2.0, 1.0, 1.0});
    write_volume(dir / kModalityB, filled_volume(d, b_height > 0 ? b_height : h, h, 2), {2.0, 1.0, 1.0});
    if (label) write_volume(dir / kLabelFile, Volume<double>(d, h, h, 0.0), {2.0, 1.0, 1.0}, nifti::kInt16);
}

std::set<std::string> ids(const std::vector<CaseRecord>& v) {
    std::set<std::string> s;
    for (const auto& c : v) s.insert(c.case_id);
    return s;
}

PhantomSpec small_phantom(std::uint64_t seed = 5) {
    PhantomSpec s;
    s.image_size = 32;
    s.depth = 3;
    s.n_cases = 4;
    s.min_radius = 3.0;
    s.max_radius = 6.0;
    s.seed = seed;
    return s;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST(SplitCases, PublishedRatioSizes) {
    const auto s10 = split_cases(fake_cases(10), {}, 1);
    EXPECT_EQ(s10.train.size(), 7u);
    EXPECT_EQ(s10.validation.size(), 1u);
    EXPECT_EQ(s10.test.size(), 2u);
    const auto s335 = split_cases(fake_cases(335), {}, 1);
    EXPECT_EQ(s335.train.size(), 235u);
    EXPECT_EQ(s335.validation.size(), 33u);
    EXPECT_EQ(s335.test.size(), 67u);
}

TEST(SplitCases, TooFewCases) {
    EXPECT_THROW(split_cases(fake_cases(2), {}, 1), InsufficientCases);
    EXPECT_THROW(split_cases(fake_cases(10), {0.5, 0.1, 0.1}, 1), ConfigError);
}

TEST(SplitCases, DeterministicDisjointAndCoveringForRandomSizes) {
    std::mt19937_64 rng(123);
    for (int trial = 0; trial < 1000; ++trial) {
        const auto n = 3 + rng() % 120;
        const auto seed = rng();
        auto cases = fake_cases(n);
        const auto a = split_cases(cases, {}, seed);
        std::shuffle(cases.begin(), cases.end(), rng);  // input order must not matter
        const auto b = split_cases(cases, {}, seed);
        ASSERT_EQ(ids(a.train), ids(b.train));
        ASSERT_EQ(ids(a.validation), ids(b.validation));
        ASSERT_EQ(ids(a.test), ids(b.test));
        std::set<std::string> all;
        for (const auto* part : {&a.train, &a.validation, &a.test}) {
            for (const auto& c : *part) ASSERT_TRUE(all.insert(c.case_id).second) << "case in two splits";
        }
        ASSERT_EQ(all.size(), n);
        for (const auto& c : a.test) ASSERT_EQ(c.split, Split::Test);
    }
}

TEST(SplitCases, SeedChangesPartition) {
    const auto a = split_cases(fake_cases(50), {}, 1), b = split_cases(fake_cases(50), {}, 2);
    EXPECT_NE(ids(a.test), ids(b.test));
}

TEST(LoadCases, SortedRecordsWithHeaders) {
    const auto root = oracle::scratch_dir("load");
    write_case(root, "zeta", 2, 8);
    write_case(root, "alpha", 2, 8);
    const auto cases = load_cases(root);
    ASSERT_EQ(cases.size(), 2u);
    EXPECT_EQ(cases[0].case_id, "alpha");
    EXPECT_EQ(cases[1].case_id, "zeta");
    EXPECT_EQ(cases[0].depth, 2);
    EXPECT_EQ(cases[0].height, 8);
    EXPECT_DOUBLE_EQ(cases[0].spacing.z_mm, 2.0);
    EXPECT_TRUE(cases[0].label.has_value());
    fs::remove_all(root);
}

TEST(LoadCases, MissingLabelOnlyMattersInLabeledRole) {
    const auto root = oracle::scratch_dir("nolabel");
    write_case(root, "c1", 2, 8, false);
    EXPECT_THROW(load_cases(root, true), IncompleteCase);
    const auto cases = load_cases(root, false);
    ASSERT_EQ(cases.size(), 1u);
    EXPECT_FALSE(cases[0].label.has_value());
    fs::remove_all(root);
}

TEST(LoadCases, MissingModalityIsIncomplete) {
    const auto root = oracle::scratch_dir("nomod");
    write_case(root, "c1", 2, 8);
    fs::remove(root / "c1" / kModalityB);
    EXPECT_THROW(load_cases(root), IncompleteCase);
    fs::remove_all(root);
}

TEST(LoadCases, ShapeMismatchNamesBothShapes) {
    const auto root = oracle::scratch_dir("shape");
    write_case(root, "c1", 2, 8, true, 6);
    try {
        load_cases(root);
        FAIL() << "expected IngestError";
    } catch (const IngestError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("2x8x8"), std::string::npos) << msg;
        EXPECT_NE(msg.find("2x6x8"), std::string::npos) << msg;
    }
    fs::remove_all(root);
}

TEST(LoadCases, UnreadableFileNamesPath) {
    const auto root = oracle::scratch_dir("corrupt");
    write_case(root, "c1", 2, 8);
    std::ofstream(root / "c1" / kModalityA) << "not a volume";
    try {
        load_cases(root);
        FAIL() << "expected IngestError";
    } catch (const IngestError& e) {
        EXPECT_NE(std::string(e.what()).find(kModalityA), std::string::npos) << e.what();
    }
    EXPECT_THROW(load_cases(root / "missing"), IngestError);
    fs::remove_all(root);
}

TEST(VolumeIo, RoundTripPreservesValuesAndSpacing) {
    const auto root = oracle::scratch_dir("nifti");
    Volume<double> v(3, 4, 5, 0.0);
    for (std::size_t i = 0; i < v.size(); ++i) v.values()[i] = 0.25 * static_cast<double>(i);
    write_volume(root / "x.vol", v, {3.0, 0.5, 0.75});
    VolumeHeader h;
    const auto back = read_volume(root / "x.vol", &h);
    EXPECT_EQ(back.values(), v.values());
    EXPECT_EQ(h.depth, 3);
    EXPECT_EQ(h.height, 4);
    EXPECT_EQ(h.width, 5);
    EXPECT_FLOAT_EQ(static_cast<float>(h.spacing.z_mm), 3.0f);
    EXPECT_FLOAT_EQ(static_cast<float>(h.spacing.row_mm), 0.5f);
    EXPECT_FLOAT_EQ(static_cast<float>(h.spacing.col_mm), 0.75f);
    fs::remove_all(root);
}

TEST(Resize, AreaPreservesMeanAndNearestKeepsLabels) {
    Grid2D<double> g(8, 8, 0.0);
    g.values() = oracle::random_values(64, 3, 0.0, 1.0);
    const auto small = resize_area(g, 4, 4);
    double a = 0.0, b = 0.0;
    for (double v : g.values()) a += v / 64.0;
    for (double v : small.values()) b += v / 16.0;
    EXPECT_NEAR(a, b, 1e-12);
    EXPECT_NEAR(small(0, 0), (g(0, 0) + g(0, 1) + g(1, 0) + g(1, 1)) / 4.0, 1e-12);

    Grid2D<std::int32_t> lab(8, 8, 0);
    for (std::int64_t i = 0; i < 64; ++i) lab.values()[i] = static_cast<std::int32_t>(i % 4) * 2;
    const std::set<std::int32_t> allowed{0, 2, 4, 6};
    const auto resized = resize_nearest(lab, 5, 3);
    for (auto v : resized.values()) EXPECT_TRUE(allowed.count(v));
}

TEST(Streams, OneItemPerNonEmptySliceAndEmptySlicesDropped) {
    const auto root = oracle::scratch_dir("stream");
    write_case(root, "c1", 10, 16);
    // Blank out slice 4 of modality A.
    auto vol = read_volume(root / "c1" / kModalityA);
    for (std::int64_t y = 0; y < 16; ++y)
        for (std::int64_t x = 0; x < 16; ++x) vol(4, y, x) = 0.0;
    write_volume(root / "c1" / kModalityA, vol, {2.0, 1.0, 1.0});
    const auto cases = load_cases(root);
    StreamOptions so;
    so.height = so.width = 16;
    std::vector<std::int64_t> kept;
    const auto items = load_case_slices(cases[0], so, &kept);
    EXPECT_EQ(items.size(), 9u);
    EXPECT_EQ(std::count(kept.begin(), kept.end(), 4), 0);
    for (const auto& it : items) {
        ASSERT_TRUE(it.label.has_value());
        EXPECT_EQ(it.slice.domain, Domain::Source);
    }
    so.modality = Modality::B;
    EXPECT_EQ(load_case_slices(cases[0], so).size(), 10u);
    fs::remove_all(root);
}

TEST(Streams, UnlabeledRoleHasNoLabels) {
    const auto root = oracle::scratch_dir("unlab");
    write_case(root, "c1", 3, 16, false);
    StreamOptions so;
    so.height = so.width = 16;
    so.with_labels = false;
    so.modality = Modality::B;
    so.domain = Domain::Target;
    const auto s = make_slice_stream(load_cases(root, false), so, 9);
    ASSERT_EQ(s.size(), 3u);
    for (const auto& it : s.items()) EXPECT_FALSE(it.label.has_value());
    so.with_labels = true;
    EXPECT_THROW(make_slice_stream(load_cases(root, false), so, 9), IncompleteCase);
    fs::remove_all(root);
}

TEST(Streams, EpochOrderDeterministicPermutation) {
    std::vector<StreamItem> items(25);
    const SliceStream s(std::move(items), 77);
    const auto e0 = s.epoch_order(0);
    EXPECT_EQ(e0, s.epoch_order(0));
    const auto e1 = s.epoch_order(1);
    EXPECT_NE(e0, e1);
    auto a = e0, b = e1;
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    EXPECT_EQ(a, b);
    EXPECT_EQ(a.front(), 0u);
    EXPECT_EQ(a.back(), 24u);
}

TEST(Streams, ResizedSlicesCarryScaledSpacingAndNormalizedSupport) {
    const auto root = oracle::scratch_dir("resize");
    write_case(root, "c1", 2, 32);
    StreamOptions so;
    so.height = so.width = 16;
    const auto items = load_case_slices(load_cases(root)[0], so);
    ASSERT_FALSE(items.empty());
    for (const auto& it : items) {
        EXPECT_EQ(it.slice.height(), 16);
        EXPECT_DOUBLE_EQ(it.slice.spacing.row_mm, 2.0);
        double sum = 0.0, sq = 0.0;
        int n = 0;
        for (double v : it.slice.pixels.values()) {
            if (v == 0.0) continue;
            sum += v;
            sq += v * v;
            ++n;
        }
        EXPECT_NEAR(sum / n, 0.0, 1e-3);
        EXPECT_NEAR(std::sqrt(sq / n), 1.0, 1e-3);
    }
    fs::remove_all(root);
}

TEST(Streams, AnonymizedStreamsExposeNoPairingKey) {
    const auto root = oracle::scratch_dir("anon");
    generate_phantom(small_phantom(), root);
    const auto cases = load_cases(root);
    StreamOptions so;
    so.height = so.width = 32;
    so.with_labels = false;
    so.modality = Modality::B;
    so.domain = Domain::Target;
    so.anonymize = true;
    const auto target = make_slice_stream(cases, so, 31);
    const auto real_ids = ids(cases);
    std::set<std::string> seen;
    for (const auto& it : target.items()) {
        EXPECT_EQ(real_ids.count(it.slice.case_id), 0u) << it.slice.case_id;
        EXPECT_EQ(it.slice.case_id.find("case_"), std::string::npos);
        seen.insert(it.slice.case_id);
    }
    EXPECT_EQ(seen.size(), cases.size());
    // A different salt gives unrelated tokens.
    EXPECT_NE(opaque_id("case_000", 1), opaque_id("case_000", 2));
    fs::remove_all(root);
}

TEST(Phantom, SameSeedIsBitwiseIdentical) {
    const auto a = oracle::scratch_dir("ph_a"), b = oracle::scratch_dir("ph_b");
    generate_phantom(small_phantom(), a);
    generate_phantom(small_phantom(), b);
    for (const auto& e : fs::recursive_directory_iterator(a)) {
        if (!e.is_regular_file()) continue;
        const auto other = b / fs::relative(e.path(), a);
        ASSERT_TRUE(fs::exists(other)) << other;
        EXPECT_EQ(slurp(e.path()), slurp(other)) << e.path();
    }
    const auto c = render_phantom_case(small_phantom(6), 0);
    EXPECT_NE(c.domain_a.values(), render_phantom_case(small_phantom(5), 0).domain_a.values());
    fs::remove_all(a);
    fs::remove_all(b);
}

TEST(Phantom, LabelsNestAndUseTheBratsEncoding) {
    for (std::int64_t i = 0; i < 10; ++i) {
        const auto pc = render_phantom_case(small_phantom(11), i);
        const std::set<std::int32_t> allowed{0, 1, 2, 4};
        ClassVolume classes(pc.raw_label.depth(), pc.raw_label.height(), pc.raw_label.width(), 0);
        bool lesion = false;
        for (std::size_t k = 0; k < classes.size(); ++k) {
            const auto raw = static_cast<std::int32_t>(pc.raw_label.values()[k]);
            ASSERT_TRUE(allowed.count(raw)) << raw;
            classes.values()[k] = raw == 4 ? 3 : raw;
            lesion = lesion || raw != 0;
        }
        EXPECT_TRUE(lesion);
        const auto r = compose_regions(classes, LabelScheme::Brats);
        for (std::size_t k = 0; k < classes.size(); ++k) {
            EXPECT_LE(r.at("ET").values()[k], r.at("TC").values()[k]);
            EXPECT_LE(r.at("TC").values()[k], r.at("WT").values()[k]);
        }
    }
}

TEST(Phantom, LesionCoreContrastIsInvertedAcrossDomains) {
    PhantomSpec spec = small_phantom(12);
    spec.noise = 0.0;
    const auto pc = render_phantom_case(spec, 0);
    double a_et = 0, b_et = 0, a_bg = 0, b_bg = 0;
    int n_et = 0, n_bg = 0;
    for (std::size_t k = 0; k < pc.raw_label.size(); ++k) {
        if (pc.domain_a.values()[k] == 0.0) continue;
        if (pc.raw_label.values()[k] == 4) {
            a_et += pc.domain_a.values()[k];
            b_et += pc.domain_b.values()[k];
            ++n_et;
        } else if (pc.raw_label.values()[k] == 0) {
            a_bg += pc.domain_a.values()[k];
            b_bg += pc.domain_b.values()[k];
            ++n_bg;
        }
    }
    ASSERT_GT(n_et, 0);
    ASSERT_GT(n_bg, 0);
    EXPECT_GT(a_et / n_et, a_bg / n_bg);
    EXPECT_LT(b_et / n_et, b_bg / n_bg);
    // The intensity law is strictly decreasing.
    for (int i = 0; i < 20; ++i) EXPECT_GT(phantom_domain_b(0.05 * i, 1.5), phantom_domain_b(0.05 * (i + 1), 1.5));
}

TEST(Phantom, SharedMaskAndPairingManifest) {
    const auto root = oracle::scratch_dir("pair");
    generate_phantom(small_phantom(), root);
    const auto pairs = read_pairing_manifest(root);
    ASSERT_EQ(pairs.size(), 4u);
    EXPECT_EQ(pairs[0].case_id, "case_000");
    EXPECT_TRUE(fs::exists(pairs[0].domain_a));
    EXPECT_TRUE(fs::exists(pairs[0].domain_b));
    // Foreground support of both renderings coincides with the brain region.
    const auto a = read_volume(pairs[1].domain_a), b = read_volume(pairs[1].domain_b);
    for (std::size_t k = 0; k < a.size(); ++k) EXPECT_EQ(a.values()[k] != 0.0, b.values()[k] != 0.0);
    fs::remove_all(root);
}

TEST(Phantom, SpecValidation) {
    PhantomSpec s = small_phantom();
    s.n_cases = 0;
    EXPECT_THROW(s.validate(), ConfigError);
    s = small_phantom();
    s.image_size = 8;
    EXPECT_THROW(s.validate(), ConfigError);
    s = small_phantom();
    s.max_radius = 20.0;
    EXPECT_THROW(s.validate(), ConfigError);
}
