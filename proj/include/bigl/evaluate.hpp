#ifndef BIGL_EVALUATE_HPP
#define BIGL_EVALUATE_HPP

// Case-level inference, metrics reports and their on-disk forms:
//   metrics.txt   table of mean$\pm$std per region
//   records.csv   one row per (case, region, metric), full precision
//   overlays/     optional PPM images of the central lesion slice

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "bigl/data.hpp"
#include "bigl/metrics.hpp"
#include "bigl/segnet.hpp"

namespace bigl {

struct EvalOptions {
    Modality modality = Modality::A;
    Domain domain = Domain::Source;
    LabelScheme scheme = LabelScheme::Brats;
    std::int64_t height = 64, width = 64;
    /// Ground truth is passed through as the prediction.
    bool self_test = false;
};

struct CasePrediction {
    std::string case_id;
    ClassVolume prediction, ground_truth;
    Spacing3 spacing;
    Volume<double> image;  // normalized intensities, zero on skipped slices
};

/// Predicts every slice with brain support; skipped slices are background.
/// Metrics are computed on the resampled grid with correspondingly scaled
/// in-plane spacing.
inline CasePrediction predict_case(const SegNet* net, const CaseRecord& rec, const EvalOptions& opt) {
    if (!rec.label) throw IncompleteCase(rec.case_id + ": evaluation needs a label file");
    const auto h = opt.height, w = opt.width;
    CasePrediction out;
    out.case_id = rec.case_id;
    out.spacing = {rec.spacing.z_mm, rec.spacing.row_mm * static_cast<double>(rec.height) / static_cast<double>(h),
                   rec.spacing.col_mm * static_cast<double>(rec.width) / static_cast<double>(w)};
    out.prediction = ClassVolume(rec.depth, h, w, 0);
    out.ground_truth = ClassVolume(rec.depth, h, w, 0);
    out.image = Volume<double>(rec.depth, h, w, 0.0);

    const Volume<double> lab = read_volume(*rec.label);
    for (std::int64_t z = 0; z < rec.depth; ++z) {
        Grid2D<std::int32_t> raw(rec.height, rec.width, 0);
        for (std::int64_t y = 0; y < rec.height; ++y) {
            for (std::int64_t x = 0; x < rec.width; ++x) raw(y, x) = static_cast<std::int32_t>(std::lround(lab(z, y, x)));
        }
        const LabelMask m = remap_labels(resize_nearest(raw, h, w), opt.scheme);
        for (std::int64_t y = 0; y < h; ++y) {
            for (std::int64_t x = 0; x < w; ++x) out.ground_truth(z, y, x) = m.classes(y, x);
        }
    }

    StreamOptions so;
    so.modality = opt.modality;
    so.domain = opt.domain;
    so.with_labels = false;
    so.scheme = opt.scheme;
    so.height = h;
    so.width = w;
    std::vector<std::int64_t> kept;
    const auto items = load_case_slices(rec, so, &kept);
    for (std::size_t i = 0; i < items.size(); ++i) {
        for (std::int64_t y = 0; y < h; ++y) {
            for (std::int64_t x = 0; x < w; ++x) out.image(kept[i], y, x) = items[i].slice.pixels(y, x);
        }
    }
    if (opt.self_test) {
        out.prediction = out.ground_truth;
        return out;
    }
    if (!net) throw ConfigError("evaluation without a network requires self-test mode");
    if (items.empty()) return out;

    std::vector<Slice2D> slices;
    for (const auto& it : items) slices.push_back(it.slice);
    NoGradGuard no_grad;
    const Tensor logits = net->forward(to_network_tensor(slices)).logits;
    const auto names = class_names(opt.scheme);
    for (std::size_t i = 0; i < items.size(); ++i) {
        const LabelMask m = predict_mask(logits, static_cast<std::int64_t>(i), names);
        for (std::int64_t y = 0; y < h; ++y) {
            for (std::int64_t x = 0; x < w; ++x) out.prediction(kept[i], y, x) = m.classes(y, x);
        }
    }
    return out;
}

inline MetricsReport metrics_from_predictions(const std::vector<CasePrediction>& preds, LabelScheme scheme) {
    MetricsReport report;
    for (const auto& r : regions_for(scheme)) report.regions.push_back(r.name);
    for (const auto& p : preds) {
        auto rows = case_metrics(p.case_id, p.prediction, p.ground_truth, scheme, p.spacing, &report.undefined_cases);
        report.cases.insert(report.cases.end(), rows.begin(), rows.end());
    }
    aggregate(report);
    return report;
}

inline MetricsReport evaluate_cases(const SegNet* net, const std::vector<CaseRecord>& cases, const EvalOptions& opt,
                                    std::vector<CasePrediction>* predictions_out = nullptr) {
    std::vector<CasePrediction> preds;
    for (const auto& c : cases) preds.push_back(predict_case(net, c, opt));
    MetricsReport report = metrics_from_predictions(preds, opt.scheme);
    if (predictions_out) *predictions_out = std::move(preds);
    return report;
}

/// Mean Dice of one region over cases, as a fraction.
inline double mean_region_dice(const MetricsReport& r, const std::string& region) {
    double acc = 0.0;
    int n = 0;
    for (const auto& c : r.cases) {
        if (c.region == region) {
            acc += c.dsc;
            ++n;
        }
    }
    return n ? acc / n : 0.0;
}

// ------------------------------------------------------------------- files

inline std::string format_metrics_table(const MetricsReport& r) {
    std::ostringstream os;
    char line[256];
    std::snprintf(line, sizeof(line), "%-8s %-22s %-22s %-22s\n", "Region", "DSC (%)", "HD95 (mm)", "ASD (mm)");
    os << line;
    for (const auto& region : r.regions) {
        const auto& s = r.summary.at(region);
        std::snprintf(line, sizeof(line), "%-8s %-22s %-22s %-22s\n", region.c_str(),
                      format_mean_std(s.dsc_mean, s.dsc_std).c_str(), format_optional(s.hd95_mean, s.hd95_std).c_str(),
                      format_optional(s.asd_mean, s.asd_std).c_str());
        os << line;
    }
    os << "cases: " << r.n_cases << "\n";
    for (const auto& u : r.undefined_cases) os << "N/A " << u.case_id << " " << u.region << ": " << u.reason << "\n";
    return os.str();
}

inline std::string format_optional_value(const std::optional<double>& v) {
    if (!v) return "NA";
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", *v);
    return buf;
}

inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
    std::error_code ec;
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path(), ec);
    std::ofstream out(path);
    out << text;
    if (!out.flush()) throw IngestError(path.string() + ": write failed");
}

/// Long format: one row per case, region and metric; undefined values are NA.
inline std::string format_case_records(const MetricsReport& r) {
    std::ostringstream os;
    os << "case_id,region,metric,value\n";
    for (const auto& c : r.cases) {
        os << c.case_id << ',' << c.region << ",dsc," << format_optional_value(c.dsc) << '\n';
        os << c.case_id << ',' << c.region << ",hd95," << format_optional_value(c.hd95) << '\n';
        os << c.case_id << ',' << c.region << ",asd," << format_optional_value(c.asd) << '\n';
    }
    return os.str();
}

/// Parses records.csv back into a report (summary re-aggregated).
inline MetricsReport read_case_records(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IngestError(path.string() + ": cannot open");
    std::string line;
    if (!std::getline(in, line) || line != "case_id,region,metric,value") {
        throw IngestError(path.string() + ": unexpected header");
    }
    MetricsReport r;
    std::map<std::pair<std::string, std::string>, std::size_t> index;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::vector<std::string> f;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) f.push_back(cell);
        if (f.size() != 4) throw IngestError(path.string() + ": malformed row '" + line + "'");
        std::optional<double> v;
        try {
            if (f[3] != "NA") v = std::stod(f[3]);
        } catch (const std::logic_error&) {
            throw IngestError(path.string() + ": malformed number in '" + line + "'");
        }
        const auto key = std::make_pair(f[0], f[1]);
        auto it = index.find(key);
        if (it == index.end()) {
            it = index.emplace(key, r.cases.size()).first;
            r.cases.push_back({f[0], f[1], 0.0, std::nullopt, std::nullopt});
        }
        auto& c = r.cases[it->second];
        if (v && !(*v >= 0.0 && std::isfinite(*v))) {
            throw IngestError(path.string() + ": negative or non-finite value in '" + line + "'");
        }
        if (f[2] == "dsc") {
            if (!v) throw IngestError(path.string() + ": dsc cannot be NA");
            if (*v > 1.0) throw IngestError(path.string() + ": dsc is a fraction in [0, 1], got '" + f[3] + "'");
            c.dsc = *v;
        } else if (f[2] == "hd95") {
            c.hd95 = v;
        } else if (f[2] == "asd") {
            c.asd = v;
        } else {
            throw IngestError(path.string() + ": unknown metric '" + f[2] + "'");
        }
        if (std::find(r.regions.begin(), r.regions.end(), f[1]) == r.regions.end()) r.regions.push_back(f[1]);
    }
    // Scheme order for known regions; anything else keeps file order after them.
    std::vector<std::string> canonical;
    for (const auto& s : {brats_regions(), cardiac_regions()}) {
        for (const auto& reg : s) canonical.push_back(reg.name);
    }
    auto rank = [&](const std::string& n) {
        return std::find(canonical.begin(), canonical.end(), n) - canonical.begin();
    };
    std::stable_sort(r.regions.begin(), r.regions.end(),
                     [&](const std::string& a, const std::string& b) { return rank(a) < rank(b); });
    aggregate(r);
    return r;
}

/// Binary PPM of the slice with the most ground-truth lesion pixels:
/// grayscale image, ground-truth outline in green, prediction tinted by class.
inline void write_overlay(const std::filesystem::path& path, const CasePrediction& p) {
    std::int64_t best = 0, best_count = -1;
    for (std::int64_t z = 0; z < p.ground_truth.depth(); ++z) {
        std::int64_t n = 0;
        for (std::int64_t y = 0; y < p.ground_truth.height(); ++y) {
            for (std::int64_t x = 0; x < p.ground_truth.width(); ++x) n += p.ground_truth(z, y, x) != 0;
        }
        if (n > best_count) {
            best = z;
            best_count = n;
        }
    }
    const auto h = p.image.height(), w = p.image.width();
    static constexpr unsigned char kTint[5][3] = {{0, 0, 0}, {255, 64, 64}, {255, 200, 0}, {64, 128, 255}, {200, 0, 200}};
    std::vector<unsigned char> rgb(static_cast<std::size_t>(h * w * 3));
    for (std::int64_t y = 0; y < h; ++y) {
        for (std::int64_t x = 0; x < w; ++x) {
            const double v = std::clamp((p.image(best, y, x) + 3.0) / 6.0, 0.0, 1.0);
            auto* px = &rgb[static_cast<std::size_t>((y * w + x) * 3)];
            const auto gray = static_cast<unsigned char>(std::lround(255.0 * v));
            px[0] = px[1] = px[2] = gray;
            const auto c = std::clamp<std::int32_t>(p.prediction(best, y, x), 0, 4);
            if (c != 0) {
                for (int k = 0; k < 3; ++k) px[k] = static_cast<unsigned char>((px[k] + kTint[c][k]) / 2);
            }
            const bool gt = p.ground_truth(best, y, x) != 0;
            const bool edge = gt && (y == 0 || x == 0 || y == h - 1 || x == w - 1 || p.ground_truth(best, y - 1, x) == 0 ||
                                     p.ground_truth(best, y + 1, x) == 0 || p.ground_truth(best, y, x - 1) == 0 ||
                                     p.ground_truth(best, y, x + 1) == 0);
            if (edge) {
                px[0] = 0;
                px[1] = 255;
                px[2] = 0;
            }
        }
    }
    std::ofstream out(path, std::ios::binary);
    out << "P6\n" << w << ' ' << h << "\n255\n";
    out.write(reinterpret_cast<const char*>(rgb.data()), static_cast<std::streamsize>(rgb.size()));
    if (!out.flush()) throw IngestError(path.string() + ": write failed");
}

}  // namespace bigl

#endif  // BIGL_EVALUATE_HPP
