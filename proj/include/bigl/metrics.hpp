#ifndef BIGL_METRICS_HPP
#define BIGL_METRICS_HPP

// Overlap and surface-distance metrics on 2D or stacked 3D binary masks,
// region composition, and the mean +- std aggregation used for tables.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "bigl/domain.hpp"

namespace bigl {

struct Spacing3 {
    double z_mm = 1.0;
    double row_mm = 1.0;
    double col_mm = 1.0;
};

/// D x H x W grid; depth 1 is treated as a 2D image.
template <class T>
class Volume {
public:
    Volume() = default;
    Volume(std::int64_t depth, std::int64_t height, std::int64_t width, T fill = T{})
        : depth_(depth), height_(height), width_(width),
          data_(static_cast<std::size_t>(depth * height * width), fill) {}

    static Volume from_grid(const Grid2D<T>& g) {
        Volume v(1, g.height(), g.width());
        v.data_ = g.values();
        return v;
    }

    std::int64_t depth() const { return depth_; }
    std::int64_t height() const { return height_; }
    std::int64_t width() const { return width_; }
    std::size_t size() const { return data_.size(); }

    T& operator()(std::int64_t z, std::int64_t y, std::int64_t x) {
        return data_[static_cast<std::size_t>((z * height_ + y) * width_ + x)];
    }
    const T& operator()(std::int64_t z, std::int64_t y, std::int64_t x) const {
        return data_[static_cast<std::size_t>((z * height_ + y) * width_ + x)];
    }

    const std::vector<T>& values() const { return data_; }
    std::vector<T>& values() { return data_; }

    template <class U>
    bool same_shape(const Volume<U>& o) const {
        return depth_ == o.depth() && height_ == o.height() && width_ == o.width();
    }

    /// Writes a 2D grid into plane z.
    void set_slice(std::int64_t z, const Grid2D<T>& g) {
        if (g.height() != height_ || g.width() != width_) throw ShapeMismatch("slice does not fit volume plane");
        std::copy(g.values().begin(), g.values().end(), data_.begin() + z * height_ * width_);
    }

    Grid2D<T> slice(std::int64_t z) const {
        return Grid2D<T>(height_, width_,
                         std::vector<T>(data_.begin() + z * height_ * width_, data_.begin() + (z + 1) * height_ * width_));
    }

private:
    std::int64_t depth_ = 0, height_ = 0, width_ = 0;
    std::vector<T> data_;
};

using BinaryMask = Volume<std::uint8_t>;
using ClassVolume = Volume<std::int32_t>;

// ------------------------------------------------------------------ regions

struct RegionSpec {
    std::string name;
    std::set<std::int32_t> member_classes;
};

/// BraTS evaluation regions over remapped classes {1: NCR/NET, 2: ED, 3: ET}.
inline std::vector<RegionSpec> brats_regions() {
    return {{"WT", {1, 2, 3}}, {"TC", {1, 3}}, {"ET", {3}}};
}

inline std::vector<RegionSpec> cardiac_regions() {
    return {{"AA", {1}}, {"LAC", {2}}, {"LVC", {3}}, {"MYO", {4}}};
}

inline std::vector<RegionSpec> regions_for(LabelScheme scheme) {
    return scheme == LabelScheme::Brats ? brats_regions() : cardiac_regions();
}

inline std::int32_t class_count(LabelScheme scheme) { return scheme == LabelScheme::Brats ? 4 : 5; }

inline std::map<std::string, BinaryMask> compose_regions(const ClassVolume& mask, LabelScheme scheme) {
    const auto limit = class_count(scheme);
    for (auto v : mask.values()) {
        if (v < 0 || v >= limit) {
            throw LabelSchemeViolation("class " + std::to_string(v) + " is outside the scheme's " +
                                       std::to_string(limit) + " classes");
        }
    }
    std::map<std::string, BinaryMask> out;
    for (const auto& region : regions_for(scheme)) {
        BinaryMask b(mask.depth(), mask.height(), mask.width(), 0);
        for (std::size_t i = 0; i < b.size(); ++i) b.values()[i] = region.member_classes.count(mask.values()[i]) ? 1 : 0;
        out.emplace(region.name, std::move(b));
    }
    return out;
}

inline std::map<std::string, BinaryMask> compose_regions(const LabelMask& mask, LabelScheme scheme) {
    if (mask.num_classes != class_count(scheme)) {
        throw LabelSchemeViolation("mask has " + std::to_string(mask.num_classes) + " classes, scheme expects " +
                                   std::to_string(class_count(scheme)));
    }
    return compose_regions(ClassVolume::from_grid(mask.classes), scheme);
}

// -------------------------------------------------------------------- dice

/// 2|P n G| / (|P| + |G|); both empty gives 1.
template <class T>
double dice(const Volume<T>& pred, const Volume<T>& gt) {
    if (!pred.same_shape(gt)) throw ShapeMismatch("dice: mask shapes differ");
    std::int64_t p = 0, g = 0, both = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const bool a = pred.values()[i] != 0, b = gt.values()[i] != 0;
        p += a;
        g += b;
        both += a && b;
    }
    if (p + g == 0) return 1.0;
    return 2.0 * static_cast<double>(both) / static_cast<double>(p + g);
}

template <class T>
double dice(const Grid2D<T>& pred, const Grid2D<T>& gt) {
    if (!pred.same_shape(gt)) throw ShapeMismatch("dice: mask shapes differ");
    return dice(Volume<T>::from_grid(pred), Volume<T>::from_grid(gt));
}

// -------------------------------------------------------- surface distances

/// Foreground voxels with at least one background face neighbour (4-neighbour
/// in-plane; 6-neighbour when depth > 1). Outside the grid counts as background.
template <class T>
BinaryMask border(const Volume<T>& m) {
    BinaryMask out(m.depth(), m.height(), m.width(), 0);
    const bool volumetric = m.depth() > 1;
    auto fg = [&](std::int64_t z, std::int64_t y, std::int64_t x) {
        if (z < 0 || y < 0 || x < 0 || z >= m.depth() || y >= m.height() || x >= m.width()) return false;
        return m(z, y, x) != 0;
    };
    for (std::int64_t z = 0; z < m.depth(); ++z) {
        for (std::int64_t y = 0; y < m.height(); ++y) {
            for (std::int64_t x = 0; x < m.width(); ++x) {
                if (!fg(z, y, x)) continue;
                bool edge = !fg(z, y - 1, x) || !fg(z, y + 1, x) || !fg(z, y, x - 1) || !fg(z, y, x + 1);
                if (volumetric) edge = edge || !fg(z - 1, y, x) || !fg(z + 1, y, x);
                out(z, y, x) = edge ? 1 : 0;
            }
        }
    }
    return out;
}

namespace detail {

/// Exact 1D squared distance transform (lower envelope of parabolas) along a
/// line of n samples spaced `step` apart; infinite entries are not sites.
inline void edt_line(std::vector<double>& f, std::int64_t n, double step, std::vector<std::int64_t>& v,
                     std::vector<double>& zbuf, std::vector<double>& out) {
    constexpr double inf = std::numeric_limits<double>::infinity();
    v.resize(static_cast<std::size_t>(n));
    zbuf.resize(static_cast<std::size_t>(n + 1));
    out.resize(static_cast<std::size_t>(n));
    std::int64_t k = -1;
    for (std::int64_t q = 0; q < n; ++q) {
        if (f[q] == inf) continue;
        const double xq = static_cast<double>(q) * step;
        while (k >= 0) {
            const double xv = static_cast<double>(v[k]) * step;
            const double s = ((f[q] + xq * xq) - (f[v[k]] + xv * xv)) / (2.0 * (xq - xv));
            if (s <= zbuf[k]) {
                --k;
            } else {
                ++k;
                v[k] = q;
                zbuf[k] = s;
                zbuf[k + 1] = inf;
                break;
            }
        }
        if (k < 0) {
            k = 0;
            v[0] = q;
            zbuf[0] = -inf;
            zbuf[1] = inf;
        }
    }
    if (k < 0) {
        std::fill(out.begin(), out.end(), inf);
    } else {
        std::int64_t j = 0;
        for (std::int64_t q = 0; q < n; ++q) {
            const double xq = static_cast<double>(q) * step;
            while (zbuf[j + 1] < xq) ++j;
            const double d = xq - static_cast<double>(v[j]) * step;
            out[q] = d * d + f[v[j]];
        }
    }
    for (std::int64_t q = 0; q < n; ++q) f[q] = out[q];
}

}  // namespace detail

/// Squared Euclidean distance (mm^2) from every voxel to the nearest site.
inline std::vector<double> squared_distance_transform(const BinaryMask& sites, const Spacing3& spacing) {
    constexpr double inf = std::numeric_limits<double>::infinity();
    const auto d = sites.depth(), h = sites.height(), w = sites.width();
    std::vector<double> dist(sites.size());
    for (std::size_t i = 0; i < dist.size(); ++i) dist[i] = sites.values()[i] ? 0.0 : inf;

    std::vector<double> line, out, zbuf;
    std::vector<std::int64_t> v;
    auto pass = [&](std::int64_t n, double step, auto index_of, std::int64_t outer_a, std::int64_t outer_b) {
        line.resize(static_cast<std::size_t>(n));
        for (std::int64_t a = 0; a < outer_a; ++a) {
            for (std::int64_t b = 0; b < outer_b; ++b) {
                for (std::int64_t i = 0; i < n; ++i) line[i] = dist[index_of(a, b, i)];
                detail::edt_line(line, n, step, v, zbuf, out);
                for (std::int64_t i = 0; i < n; ++i) dist[index_of(a, b, i)] = line[i];
            }
        }
    };
    pass(w, spacing.col_mm, [&](auto z, auto y, auto x) { return static_cast<std::size_t>((z * h + y) * w + x); }, d, h);
    pass(h, spacing.row_mm, [&](auto z, auto x, auto y) { return static_cast<std::size_t>((z * h + y) * w + x); }, d, w);
    if (d > 1) {
        pass(d, spacing.z_mm, [&](auto y, auto x, auto z) { return static_cast<std::size_t>((z * h + y) * w + x); }, h,
             w);
    }
    return dist;
}

struct SurfaceDistances {
    std::vector<double> pred_to_gt;  // one entry per prediction border voxel
    std::vector<double> gt_to_pred;  // one entry per ground-truth border voxel

    std::vector<double> pooled() const {
        std::vector<double> all = pred_to_gt;
        all.insert(all.end(), gt_to_pred.begin(), gt_to_pred.end());
        return all;
    }
};

template <class T>
SurfaceDistances surface_distances(const Volume<T>& pred, const Volume<T>& gt, const Spacing3& spacing) {
    if (!pred.same_shape(gt)) throw ShapeMismatch("surface distances: mask shapes differ");
    if (!(spacing.z_mm > 0.0 && spacing.row_mm > 0.0 && spacing.col_mm > 0.0)) {
        throw ConfigError("spacing must be positive");
    }
    const BinaryMask bp = border(pred), bg = border(gt);
    const bool pred_empty = std::none_of(bp.values().begin(), bp.values().end(), [](auto v) { return v != 0; });
    const bool gt_empty = std::none_of(bg.values().begin(), bg.values().end(), [](auto v) { return v != 0; });
    if (pred_empty) throw UndefinedDistance(UndefinedDistance::Side::Prediction);
    if (gt_empty) throw UndefinedDistance(UndefinedDistance::Side::GroundTruth);

    const auto to_gt = squared_distance_transform(bg, spacing);
    const auto to_pred = squared_distance_transform(bp, spacing);
    SurfaceDistances out;
    for (std::size_t i = 0; i < bp.size(); ++i) {
        if (bp.values()[i]) out.pred_to_gt.push_back(std::sqrt(to_gt[i]));
        if (bg.values()[i]) out.gt_to_pred.push_back(std::sqrt(to_pred[i]));
    }
    return out;
}

template <class T>
SurfaceDistances surface_distances(const Grid2D<T>& pred, const Grid2D<T>& gt, const Spacing& spacing) {
    return surface_distances(Volume<T>::from_grid(pred), Volume<T>::from_grid(gt),
                             Spacing3{1.0, spacing.row_mm, spacing.col_mm});
}

/// Percentile with linear interpolation between closest ranks, q in [0, 100].
inline double percentile(std::vector<double> values, double q) {
    if (values.empty()) throw ConfigError("percentile of an empty set");
    std::sort(values.begin(), values.end());
    const double pos = q / 100.0 * static_cast<double>(values.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, values.size() - 1);
    return values[lo] + (pos - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

template <class M, class S>
double hd95(const M& pred, const M& gt, const S& spacing) {
    return percentile(surface_distances(pred, gt, spacing).pooled(), 95.0);
}

template <class M, class S>
double asd(const M& pred, const M& gt, const S& spacing) {
    const auto all = surface_distances(pred, gt, spacing).pooled();
    double acc = 0.0;
    for (double v : all) acc += v;
    return acc / static_cast<double>(all.size());
}

// ------------------------------------------------------------- aggregation

struct CaseMetrics {
    std::string case_id;
    std::string region;
    double dsc = 0.0;  // fraction in [0, 1]
    std::optional<double> hd95;
    std::optional<double> asd;
};

struct UndefinedCase {
    std::string case_id;
    std::string region;
    std::string reason;
};

struct RegionSummary {
    double dsc_mean = 0.0, dsc_std = 0.0;  // percent
    std::optional<double> hd95_mean, hd95_std, asd_mean, asd_std;
    std::size_t n_distance_cases = 0;
};

struct MetricsReport {
    std::vector<std::string> regions;
    std::map<std::string, RegionSummary> summary;
    std::vector<CaseMetrics> cases;
    std::size_t n_cases = 0;
    std::vector<UndefinedCase> undefined_cases;
};

/// Population mean and standard deviation.
inline std::pair<double, double> mean_std(const std::vector<double>& v) {
    if (v.empty()) return {0.0, 0.0};
    double m = 0.0;
    for (double x : v) m += x;
    m /= static_cast<double>(v.size());
    double s = 0.0;
    for (double x : v) s += (x - m) * (x - m);
    return {m, std::sqrt(s / static_cast<double>(v.size()))};
}

/// Fills `summary` from the per-case rows. Rows are aggregated in case_id
/// order so the result does not depend on evaluation order.
inline void aggregate(MetricsReport& report) {
    std::sort(report.cases.begin(), report.cases.end(), [](const CaseMetrics& a, const CaseMetrics& b) {
        return std::tie(a.case_id, a.region) < std::tie(b.case_id, b.region);
    });
    std::set<std::string> ids;
    for (const auto& c : report.cases) ids.insert(c.case_id);
    report.n_cases = ids.size();
    report.summary.clear();
    for (const auto& region : report.regions) {
        std::vector<double> dsc, hd, sd;
        for (const auto& c : report.cases) {
            if (c.region != region) continue;
            dsc.push_back(100.0 * c.dsc);
            if (c.hd95) hd.push_back(*c.hd95);
            if (c.asd) sd.push_back(*c.asd);
        }
        RegionSummary s;
        std::tie(s.dsc_mean, s.dsc_std) = mean_std(dsc);
        s.n_distance_cases = hd.size();
        if (!hd.empty()) {
            auto [m, d] = mean_std(hd);
            s.hd95_mean = m;
            s.hd95_std = d;
        }
        if (!sd.empty()) {
            auto [m, d] = mean_std(sd);
            s.asd_mean = m;
            s.asd_std = d;
        }
        report.summary[region] = s;
    }
}

/// Metrics of one case over every region of the scheme.
inline std::vector<CaseMetrics> case_metrics(const std::string& case_id, const ClassVolume& pred,
                                             const ClassVolume& gt, LabelScheme scheme, const Spacing3& spacing,
                                             std::vector<UndefinedCase>* undefined = nullptr) {
    const auto pr = compose_regions(pred, scheme);
    const auto gr = compose_regions(gt, scheme);
    std::vector<CaseMetrics> out;
    for (const auto& region : regions_for(scheme)) {
        const auto& p = pr.at(region.name);
        const auto& g = gr.at(region.name);
        CaseMetrics m{case_id, region.name, dice(p, g), std::nullopt, std::nullopt};
        const bool p_any = std::any_of(p.values().begin(), p.values().end(), [](auto v) { return v != 0; });
        const bool g_any = std::any_of(g.values().begin(), g.values().end(), [](auto v) { return v != 0; });
        if (!p_any && !g_any) {
            m.hd95 = 0.0;
            m.asd = 0.0;
        } else {
            try {
                const auto pooled = surface_distances(p, g, spacing).pooled();
                m.hd95 = percentile(pooled, 95.0);
                double acc = 0.0;
                for (double v : pooled) acc += v;
                m.asd = acc / static_cast<double>(pooled.size());
            } catch (const UndefinedDistance& e) {
                if (undefined) undefined->push_back({case_id, region.name, e.what()});
            }
        }
        out.push_back(std::move(m));
    }
    return out;
}

// -------------------------------------------------------------- formatting

/// "80.39$\pm$12.48"
inline std::string format_mean_std(double mean, double std) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.2f$\\pm$%.2f", mean, std);
    return buf;
}

inline std::string format_optional(const std::optional<double>& mean, const std::optional<double>& std) {
    if (!mean) return "N/A";
    return format_mean_std(*mean, std.value_or(0.0));
}

}  // namespace bigl

#endif  // BIGL_METRICS_HPP
