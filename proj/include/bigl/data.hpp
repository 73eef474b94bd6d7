#ifndef BIGL_DATA_HPP
#define BIGL_DATA_HPP

// Dataset ingestion, patient-level splitting, slice streams and the
// synthetic two-domain phantom.
//
// Layout:   root/<case_id>/{modA.vol, modB.vol, label.vol}
// Volumes are single-file NIfTI-1, gzip-compressed. Labels use the raw
// scheme encoding (BraTS: 0, 1, 2, 4).

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "bigl/domain.hpp"
#include "bigl/nifti.hpp"
#include "bigl/nn.hpp"

namespace bigl {

namespace fs = std::filesystem;

inline constexpr const char* kModalityA = "modA.vol";
inline constexpr const char* kModalityB = "modB.vol";
inline constexpr const char* kLabelFile = "label.vol";
inline constexpr const char* kPairingManifest = "pairing_manifest";

enum class Split { Unassigned, Train, Validation, Test };

/// Which modality plays which role.
enum class Modality { A, B };

struct CaseRecord {
    std::string case_id;
    std::map<Modality, fs::path> volumes;
    std::optional<fs::path> label;
    std::int64_t depth = 0, height = 0, width = 0;
    Spacing3 spacing;
    Split split = Split::Unassigned;
};

/// Scans root for case folders, validates headers, sorts by case_id.
inline std::vector<CaseRecord> load_cases(const fs::path& root, bool require_labels = true) {
    if (!fs::is_directory(root)) throw IngestError(root.string() + ": not a directory");
    std::vector<CaseRecord> cases;
    for (const auto& entry : fs::directory_iterator(root)) {
        if (!entry.is_directory()) continue;
        CaseRecord rec;
        rec.case_id = entry.path().filename().string();
        for (auto [m, name] : {std::pair{Modality::A, kModalityA}, std::pair{Modality::B, kModalityB}}) {
            const auto p = entry.path() / name;
            if (!fs::exists(p)) throw IncompleteCase(rec.case_id + ": missing " + name);
            rec.volumes[m] = p;
        }
        const auto label = entry.path() / kLabelFile;
        if (fs::exists(label)) {
            rec.label = label;
        } else if (require_labels) {
            throw IncompleteCase(rec.case_id + ": missing " + std::string(kLabelFile) + " in a labeled role");
        }

        std::optional<VolumeHeader> first;
        std::vector<fs::path> files{rec.volumes[Modality::A], rec.volumes[Modality::B]};
        if (rec.label) files.push_back(*rec.label);
        for (const auto& f : files) {
            const VolumeHeader h = read_volume_header(f);
            if (!first) {
                first = h;
                continue;
            }
            auto shape = [](const VolumeHeader& v) {
                return std::to_string(v.depth) + "x" + std::to_string(v.height) + "x" + std::to_string(v.width);
            };
            if (h.depth != first->depth || h.height != first->height || h.width != first->width) {
                throw IngestError(rec.case_id + ": volume shapes differ (" + shape(*first) + " vs " + shape(h) + " in " +
                                  f.filename().string() + ")");
            }
            if (std::abs(h.spacing.z_mm - first->spacing.z_mm) > 1e-6 ||
                std::abs(h.spacing.row_mm - first->spacing.row_mm) > 1e-6 ||
                std::abs(h.spacing.col_mm - first->spacing.col_mm) > 1e-6) {
                throw IngestError(rec.case_id + ": voxel spacing differs in " + f.filename().string());
            }
        }
        rec.depth = first->depth;
        rec.height = first->height;
        rec.width = first->width;
        rec.spacing = first->spacing;
        cases.push_back(std::move(rec));
    }
    std::sort(cases.begin(), cases.end(), [](const auto& a, const auto& b) { return a.case_id < b.case_id; });
    return cases;
}

// ------------------------------------------------------------------ splitting

struct SplitRatios {
    double train = 0.7, validation = 0.1, test = 0.2;
};

struct CaseSplits {
    std::vector<CaseRecord> train, validation, test;
};

/// Fisher-Yates with a fixed engine, so orders match across standard libraries.
template <class T>
void deterministic_shuffle(std::vector<T>& v, std::uint64_t seed) {
    Rng rng(seed);
    for (std::size_t i = v.size(); i > 1; --i) {
        const auto j = static_cast<std::size_t>(rng() % i);
        std::swap(v[i - 1], v[j]);
    }
}

/// Patient-level split. Validation and test sizes are floored; the remainder
/// goes to training.
inline CaseSplits split_cases(std::vector<CaseRecord> cases, SplitRatios ratios, std::uint64_t seed) {
    if (std::abs(ratios.train + ratios.validation + ratios.test - 1.0) > 1e-9) {
        throw ConfigError("split ratios must sum to 1");
    }
    if (cases.size() < 3) throw InsufficientCases("need at least 3 cases, got " + std::to_string(cases.size()));
    std::sort(cases.begin(), cases.end(), [](const auto& a, const auto& b) { return a.case_id < b.case_id; });
    deterministic_shuffle(cases, sub_seed(seed, "split"));
    const double n = static_cast<double>(cases.size());
    const auto n_val = static_cast<std::size_t>(std::floor(ratios.validation * n + 1e-9));
    const auto n_test = static_cast<std::size_t>(std::floor(ratios.test * n + 1e-9));
    const auto n_train = cases.size() - n_val - n_test;
    CaseSplits out;
    for (std::size_t i = 0; i < cases.size(); ++i) {
        auto& c = cases[i];
        if (i < n_train) {
            c.split = Split::Train;
            out.train.push_back(std::move(c));
        } else if (i < n_train + n_val) {
            c.split = Split::Validation;
            out.validation.push_back(std::move(c));
        } else {
            c.split = Split::Test;
            out.test.push_back(std::move(c));
        }
    }
    auto by_id = [](const auto& a, const auto& b) { return a.case_id < b.case_id; };
    std::sort(out.train.begin(), out.train.end(), by_id);
    std::sort(out.validation.begin(), out.validation.end(), by_id);
    std::sort(out.test.begin(), out.test.end(), by_id);
    return out;
}

// --------------------------------------------------------------- resampling

/// Area-weighted resampling (box filter over the source footprint).
inline Grid2D<double> resize_area(const Grid2D<double>& in, std::int64_t out_h, std::int64_t out_w) {
    if (in.height() == out_h && in.width() == out_w) return in;
    auto weights = [](std::int64_t n_in, std::int64_t n_out) {
        // per output index: list of (input index, weight)
        std::vector<std::vector<std::pair<std::int64_t, double>>> w(static_cast<std::size_t>(n_out));
        const double scale = static_cast<double>(n_in) / static_cast<double>(n_out);
        for (std::int64_t o = 0; o < n_out; ++o) {
            const double lo = o * scale, hi = (o + 1) * scale;
            for (auto i = static_cast<std::int64_t>(std::floor(lo)); i < std::min<std::int64_t>(n_in, std::ceil(hi)); ++i) {
                const double overlap = std::min(hi, i + 1.0) - std::max(lo, static_cast<double>(i));
                if (overlap > 0.0) w[o].push_back({i, overlap / scale});
            }
        }
        return w;
    };
    const auto wy = weights(in.height(), out_h), wx = weights(in.width(), out_w);
    Grid2D<double> tmp(in.height(), out_w, 0.0), out(out_h, out_w, 0.0);
    for (std::int64_t y = 0; y < in.height(); ++y) {
        for (std::int64_t x = 0; x < out_w; ++x) {
            for (auto [i, w] : wx[x]) tmp(y, x) += w * in(y, i);
        }
    }
    for (std::int64_t y = 0; y < out_h; ++y) {
        for (auto [i, w] : wy[y]) {
            for (std::int64_t x = 0; x < out_w; ++x) out(y, x) += w * tmp(i, x);
        }
    }
    return out;
}

inline Grid2D<std::int32_t> resize_nearest(const Grid2D<std::int32_t>& in, std::int64_t out_h, std::int64_t out_w) {
    if (in.height() == out_h && in.width() == out_w) return in;
    Grid2D<std::int32_t> out(out_h, out_w, 0);
    for (std::int64_t y = 0; y < out_h; ++y) {
        const auto sy = std::min<std::int64_t>(in.height() - 1, (2 * y + 1) * in.height() / (2 * out_h));
        for (std::int64_t x = 0; x < out_w; ++x) {
            const auto sx = std::min<std::int64_t>(in.width() - 1, (2 * x + 1) * in.width() / (2 * out_w));
            out(y, x) = in(sy, sx);
        }
    }
    return out;
}

// ------------------------------------------------------------------ streams

/// Slices with less nonzero support than this fraction are skipped.
inline constexpr double kMinSupportFraction = 0.01;

struct StreamItem {
    Slice2D slice;
    std::optional<LabelMask> label;
};

struct StreamOptions {
    Modality modality = Modality::A;
    Domain domain = Domain::Source;
    bool with_labels = true;
    /// Replace case ids with opaque per-stream tokens (training-time target
    /// streams carry nothing that could pair them with source slices).
    bool anonymize = false;
    LabelScheme scheme = LabelScheme::Brats;
    std::int64_t height = 64, width = 64;
};

/// Loaded slices of one role plus a seed-deterministic epoch order.
class SliceStream {
public:
    SliceStream(std::vector<StreamItem> items, std::uint64_t shuffle_seed)
        : items_(std::move(items)), seed_(shuffle_seed) {}

    std::size_t size() const { return items_.size(); }
    bool empty() const { return items_.empty(); }
    const StreamItem& operator[](std::size_t i) const { return items_[i]; }
    const std::vector<StreamItem>& items() const { return items_; }

    /// Permutation of item indices for an epoch.
    std::vector<std::size_t> epoch_order(std::int64_t epoch) const {
        std::vector<std::size_t> order(items_.size());
        std::iota(order.begin(), order.end(), 0);
        deterministic_shuffle(order, sub_seed(seed_, "epoch" + std::to_string(epoch)));
        return order;
    }

private:
    std::vector<StreamItem> items_;
    std::uint64_t seed_;
};

inline std::string opaque_id(const std::string& case_id, std::uint64_t salt) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "u%016llx", static_cast<unsigned long long>(sub_seed(salt, case_id)));
    return buf;
}

/// Axial slices of one modality, normalized and resized, in case order.
/// Returns every slice index of the case, flagging the ones kept.
inline std::vector<StreamItem> load_case_slices(const CaseRecord& rec, const StreamOptions& opt,
                                                std::vector<std::int64_t>* kept_indices = nullptr,
                                                std::uint64_t anonymize_salt = 0) {
    const Volume<double> vol = read_volume(rec.volumes.at(opt.modality));
    std::optional<Volume<double>> lab;
    if (opt.with_labels) {
        if (!rec.label) throw IncompleteCase(rec.case_id + ": labeled stream requested without a label file");
        lab = read_volume(*rec.label);
    }
    const Spacing spacing{rec.spacing.row_mm * static_cast<double>(rec.height) / static_cast<double>(opt.height),
                          rec.spacing.col_mm * static_cast<double>(rec.width) / static_cast<double>(opt.width)};
    const std::string id = opt.anonymize ? opaque_id(rec.case_id, anonymize_salt) : rec.case_id;
    std::vector<StreamItem> out;
    for (std::int64_t z = 0; z < vol.depth(); ++z) {
        Grid2D<double> raw(vol.height(), vol.width(), 0.0);
        for (std::int64_t y = 0; y < vol.height(); ++y) {
            for (std::int64_t x = 0; x < vol.width(); ++x) raw(y, x) = vol(z, y, x);
        }
        const auto nonzero = std::count_if(raw.values().begin(), raw.values().end(), [](double v) { return v != 0.0; });
        if (static_cast<double>(nonzero) < kMinSupportFraction * static_cast<double>(raw.size())) continue;
        Grid2D<double> resized = resize_area(raw, opt.height, opt.width);
        if (std::none_of(resized.values().begin(), resized.values().end(), [](double v) { return v != 0.0; })) continue;
        StreamItem item{normalize_slice(resized, spacing, opt.domain, id, z), std::nullopt};
        if (lab) {
            Grid2D<std::int32_t> raw_label(vol.height(), vol.width(), 0);
            for (std::int64_t y = 0; y < vol.height(); ++y) {
                for (std::int64_t x = 0; x < vol.width(); ++x) {
                    raw_label(y, x) = static_cast<std::int32_t>(std::lround((*lab)(z, y, x)));
                }
            }
            item.label = remap_labels(resize_nearest(raw_label, opt.height, opt.width), opt.scheme);
        }
        if (kept_indices) kept_indices->push_back(z);
        out.push_back(std::move(item));
    }
    return out;
}

inline SliceStream make_slice_stream(const std::vector<CaseRecord>& cases, const StreamOptions& opt,
                                     std::uint64_t shuffle_seed) {
    std::vector<StreamItem> items;
    for (const auto& rec : cases) {
        auto slices = load_case_slices(rec, opt, nullptr, shuffle_seed);
        for (auto& s : slices) items.push_back(std::move(s));
    }
    return SliceStream(std::move(items), shuffle_seed);
}

// ------------------------------------------------------------------ phantom

struct PhantomSpec {
    std::int64_t image_size = 64;
    std::int64_t depth = 6;
    std::int64_t n_cases = 30;
    std::int64_t min_lesions = 1, max_lesions = 2;
    double min_radius = 5.0, max_radius = 10.0;  // pixels
    double tissue_a = 0.35, ed_a = 0.55, ncr_a = 0.70, et_a = 0.90;
    double gamma_b = 1.5;
    double noise = 0.02;
    Spacing3 spacing{2.0, 1.0, 1.0};
    std::uint64_t seed = 0;

    void validate() const {
        if (n_cases < 1) throw ConfigError("phantom needs at least one case");
        if (image_size < 16) throw ConfigError("phantom image size must be >= 16");
        if (depth < 1) throw ConfigError("phantom depth must be >= 1");
        if (min_lesions < 1 || max_lesions < min_lesions) throw ConfigError("invalid lesion count range");
        if (!(min_radius > 0.0) || max_radius < min_radius) throw ConfigError("invalid lesion radius range");
        if (max_radius * 2.5 > static_cast<double>(image_size)) throw ConfigError("lesions too large for the image");
        if (noise < 0.0 || !(gamma_b > 0.0)) throw ConfigError("invalid intensity law");
    }
};

/// One phantom case rendered in both domains with a shared mask.
struct PhantomCase {
    std::string case_id;
    Volume<double> domain_a, domain_b;
    Volume<double> raw_label;  // BraTS raw encoding
};

/// Domain-B intensity law applied to a noise-free domain-A value.
/// Decreasing intensity law on [0, 1]; the argument is clamped so rounding
/// (e.g. a contracted multiply-add landing just past 1) cannot produce NaN.
inline double phantom_domain_b(double a, double gamma) {
    return 0.1 + 0.9 * std::pow(std::clamp(1.0 - a, 0.0, 1.0), gamma);
}

inline PhantomCase render_phantom_case(const PhantomSpec& spec, std::int64_t index) {
    Rng rng(sub_seed(spec.seed, "phantom-case-" + std::to_string(index)));
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::normal_distribution<double> noise(0.0, 1.0);
    const auto n = spec.image_size, d = spec.depth;
    const double c = static_cast<double>(n) / 2.0;
    const double cy = c + (u(rng) - 0.5) * 0.1 * n, cx = c + (u(rng) - 0.5) * 0.1 * n;
    const double ay = (0.34 + 0.06 * u(rng)) * n, ax = (0.38 + 0.06 * u(rng)) * n;
    const double ph1 = 6.283 * u(rng), ph2 = 6.283 * u(rng);

    struct Lesion {
        double z, y, x, r;
    };
    std::vector<Lesion> lesions;
    const auto count = spec.min_lesions + static_cast<std::int64_t>(u(rng) * (spec.max_lesions - spec.min_lesions + 1));
    for (std::int64_t k = 0; k < std::min(count, spec.max_lesions); ++k) {
        const double r = spec.min_radius + u(rng) * (spec.max_radius - spec.min_radius);
        // keep the lesion inside the brain ellipse
        const double ang = 6.283 * u(rng), rad = u(rng) * 0.9;
        const double ly = cy + std::sin(ang) * rad * std::max(0.0, ay - r - 2.0);
        const double lx = cx + std::cos(ang) * rad * std::max(0.0, ax - r - 2.0);
        const double lz = d > 2 ? 1.0 + u(rng) * static_cast<double>(d - 3) : static_cast<double>(d - 1) / 2.0;
        lesions.push_back({lz, ly, lx, r});
    }

    PhantomCase out{"", Volume<double>(d, n, n, 0.0), Volume<double>(d, n, n, 0.0), Volume<double>(d, n, n, 0.0)};
    char id[32];
    std::snprintf(id, sizeof(id), "case_%03lld", static_cast<long long>(index));
    out.case_id = id;
    const double zr = spec.spacing.z_mm / spec.spacing.row_mm;
    for (std::int64_t z = 0; z < d; ++z) {
        const double mid = static_cast<double>(d - 1) / 2.0;
        const double shrink = d > 1 ? 1.0 - 0.15 * std::abs(static_cast<double>(z) - mid) / std::max(mid, 1.0) : 1.0;
        for (std::int64_t y = 0; y < n; ++y) {
            for (std::int64_t x = 0; x < n; ++x) {
                const double ey = (y + 0.5 - cy) / (ay * shrink), ex = (x + 0.5 - cx) / (ax * shrink);
                if (ey * ey + ex * ex > 1.0) continue;
                std::int32_t cls = 0;
                for (const auto& l : lesions) {
                    const double dz = (z - l.z) * zr, dy = y + 0.5 - l.y, dx = x + 0.5 - l.x;
                    const double rho = std::sqrt(dz * dz + dy * dy + dx * dx) / l.r;
                    std::int32_t here = 0;
                    if (rho < 0.35) {
                        here = 4;  // ET
                    } else if (rho < 0.6) {
                        here = 1;  // NCR/NET
                    } else if (rho < 1.0) {
                        here = 2;  // ED
                    }
                    // innermost class wins where lesions overlap
                    auto rank = [](std::int32_t v) { return v == 4 ? 3 : (v == 1 ? 2 : (v == 2 ? 1 : 0)); };
                    if (rank(here) > rank(cls)) cls = here;
                }
                double a = spec.tissue_a + 0.04 * std::sin(0.21 * x + ph1) * std::cos(0.17 * y + ph2);
                if (cls == 2) a = spec.ed_a;
                if (cls == 1) a = spec.ncr_a;
                if (cls == 4) a = spec.et_a;
                const double b = phantom_domain_b(a, spec.gamma_b);
                out.domain_a(z, y, x) = std::clamp(a + spec.noise * noise(rng), 0.05, 1.0);
                out.domain_b(z, y, x) = std::clamp(b + spec.noise * noise(rng), 0.05, 1.0);
                out.raw_label(z, y, x) = cls;
            }
        }
    }
    return out;
}

/// Writes the phantom dataset and its pairing manifest under root.
inline void generate_phantom(const PhantomSpec& spec, const fs::path& root) {
    spec.validate();
    std::error_code ec;
    fs::create_directories(root, ec);
    if (ec) throw IngestError(root.string() + ": " + ec.message());
    std::ofstream manifest(root / kPairingManifest);
    if (!manifest) throw IngestError((root / kPairingManifest).string() + ": cannot write");
    for (std::int64_t i = 0; i < spec.n_cases; ++i) {
        const PhantomCase pc = render_phantom_case(spec, i);
        const fs::path dir = root / pc.case_id;
        fs::create_directories(dir, ec);
        if (ec) throw IngestError(dir.string() + ": " + ec.message());
        write_volume(dir / kModalityA, pc.domain_a, spec.spacing);
        write_volume(dir / kModalityB, pc.domain_b, spec.spacing);
        write_volume(dir / kLabelFile, pc.raw_label, spec.spacing, nifti::kInt16);
        manifest << pc.case_id << '\t' << (fs::path(pc.case_id) / kModalityA).string() << '\t'
                 << (fs::path(pc.case_id) / kModalityB).string() << '\n';
    }
    if (!manifest.flush()) throw IngestError("pairing manifest write failed");
}

struct PairingEntry {
    std::string case_id;
    fs::path domain_a, domain_b;
};

/// Oracle-only: the paired renderings of each phantom case.
inline std::vector<PairingEntry> read_pairing_manifest(const fs::path& root) {
    std::ifstream in(root / kPairingManifest);
    if (!in) throw IngestError((root / kPairingManifest).string() + ": cannot open");
    std::vector<PairingEntry> out;
    std::string id, a, b;
    while (in >> id >> a >> b) out.push_back({id, root / a, root / b});
    return out;
}

}  // namespace bigl

#endif  // BIGL_DATA_HPP
