#ifndef BIGL_DOMAIN_HPP
#define BIGL_DOMAIN_HPP

#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "bigl/error.hpp"

namespace bigl {

/// Row-major H x W grid.
template <class T>
class Grid2D {
public:
    Grid2D() = default;
    Grid2D(std::int64_t height, std::int64_t width, T fill = T{})
        : height_(height), width_(width), data_(static_cast<std::size_t>(height * width), fill) {}
    Grid2D(std::int64_t height, std::int64_t width, std::vector<T> data)
        : height_(height), width_(width), data_(std::move(data)) {
        if (static_cast<std::int64_t>(data_.size()) != height * width) {
            throw ShapeMismatch("grid data has " + std::to_string(data_.size()) + " values for " +
                                std::to_string(height) + "x" + std::to_string(width));
        }
    }

    std::int64_t height() const { return height_; }
    std::int64_t width() const { return width_; }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    T& operator()(std::int64_t r, std::int64_t c) { return data_[static_cast<std::size_t>(r * width_ + c)]; }
    const T& operator()(std::int64_t r, std::int64_t c) const {
        return data_[static_cast<std::size_t>(r * width_ + c)];
    }

    const std::vector<T>& values() const { return data_; }
    std::vector<T>& values() { return data_; }

    bool same_shape(const Grid2D<T>& o) const { return height_ == o.height_ && width_ == o.width_; }
    template <class U>
    bool same_shape(const Grid2D<U>& o) const {
        return height_ == o.height() && width_ == o.width();
    }

    friend bool operator==(const Grid2D&, const Grid2D&) = default;

private:
    std::int64_t height_ = 0, width_ = 0;
    std::vector<T> data_;
};

enum class Domain { Source, Target, SynSource, SynTarget };

inline const char* to_string(Domain d) {
    switch (d) {
        case Domain::Source: return "SOURCE";
        case Domain::Target: return "TARGET";
        case Domain::SynSource: return "SYN_SOURCE";
        case Domain::SynTarget: return "SYN_TARGET";
    }
    return "?";
}

struct Spacing {
    double row_mm = 1.0;
    double col_mm = 1.0;

    friend bool operator==(const Spacing&, const Spacing&) = default;
};

/// A single-channel image slice plus provenance.
struct Slice2D {
    Grid2D<double> pixels;
    Spacing spacing;
    Domain domain = Domain::Source;
    std::string case_id;
    std::int64_t slice_index = 0;

    std::int64_t height() const { return pixels.height(); }
    std::int64_t width() const { return pixels.width(); }
};

enum class LabelScheme { Brats, Cardiac };

inline std::vector<std::string> class_names(LabelScheme scheme) {
    if (scheme == LabelScheme::Brats) return {"background", "NCR/NET", "ED", "ET"};
    return {"background", "AA", "LAC", "LVC", "MYO"};
}

/// Integer class mask with contiguous indices 0..num_classes-1.
struct LabelMask {
    Grid2D<std::int32_t> classes;
    std::int32_t num_classes = 0;
    std::vector<std::string> class_names;

    std::int64_t height() const { return classes.height(); }
    std::int64_t width() const { return classes.width(); }
};

/// One labeled source slice list and one unlabeled target slice list, paired
/// by position only.
struct UnpairedBatch {
    std::vector<std::pair<Slice2D, LabelMask>> source;
    std::vector<Slice2D> target;

    std::size_t size() const { return source.size(); }

    void validate() const {
        if (source.size() != target.size()) {
            throw ShapeMismatch("unpaired batch has " + std::to_string(source.size()) + " source and " +
                                std::to_string(target.size()) + " target items");
        }
    }
};

// ----------------------------------------------------------------- operations

/// Z-score over the nonzero support; zero pixels stay zero. A support whose
/// standard deviation is below 1e-8 is only mean-centred.
inline Slice2D normalize_slice(const Grid2D<double>& raw, Spacing spacing, Domain domain = Domain::Source,
                               std::string case_id = {}, std::int64_t slice_index = 0) {
    if (raw.empty()) throw EmptyImage("grid has no pixels");
    if (!(spacing.row_mm > 0.0) || !(spacing.col_mm > 0.0)) throw ConfigError("spacing must be positive");
    double sum = 0.0;
    std::size_t n = 0;
    for (double v : raw.values()) {
        if (v != 0.0) {
            sum += v;
            ++n;
        }
    }
    if (n == 0) throw EmptyImage("grid is all zero");
    const double mu = sum / static_cast<double>(n);
    double var = 0.0;
    for (double v : raw.values()) {
        if (v != 0.0) var += (v - mu) * (v - mu);
    }
    double sd = std::sqrt(var / static_cast<double>(n));
    if (sd < 1e-8) sd = 1.0;

    Grid2D<double> out(raw.height(), raw.width(), 0.0);
    for (std::size_t i = 0; i < raw.size(); ++i) {
        const double v = raw.values()[i];
        out.values()[i] = v != 0.0 ? (v - mu) / sd : 0.0;
    }
    return Slice2D{std::move(out), spacing, domain, std::move(case_id), slice_index};
}

/// Raw label values accepted by each scheme, in contiguous-index order.
inline const std::vector<std::int32_t>& raw_labels(LabelScheme scheme) {
    static const std::vector<std::int32_t> brats{0, 1, 2, 4};
    // MM-WHS codes for ascending aorta, left atrium cavity, left ventricle cavity, myocardium
    static const std::vector<std::int32_t> cardiac{0, 820, 420, 500, 205};
    return scheme == LabelScheme::Brats ? brats : cardiac;
}

inline LabelMask remap_labels(const Grid2D<std::int32_t>& raw, LabelScheme scheme) {
    const auto& table = raw_labels(scheme);
    Grid2D<std::int32_t> out(raw.height(), raw.width(), 0);
    for (std::size_t i = 0; i < raw.size(); ++i) {
        const auto v = raw.values()[i];
        std::int32_t idx = -1;
        for (std::size_t k = 0; k < table.size(); ++k) {
            if (table[k] == v) idx = static_cast<std::int32_t>(k);
        }
        if (idx < 0) throw LabelSchemeViolation("raw label " + std::to_string(v) + " is not in the scheme");
        out.values()[i] = idx;
    }
    return LabelMask{std::move(out), static_cast<std::int32_t>(table.size()), class_names(scheme)};
}

inline Grid2D<std::int32_t> unmap_labels(const LabelMask& mask, LabelScheme scheme) {
    const auto& table = raw_labels(scheme);
    Grid2D<std::int32_t> out(mask.height(), mask.width(), 0);
    for (std::size_t i = 0; i < out.size(); ++i) {
        const auto c = mask.classes.values()[i];
        if (c < 0 || c >= static_cast<std::int32_t>(table.size())) {
            throw LabelSchemeViolation("class index " + std::to_string(c) + " out of range");
        }
        out.values()[i] = table[static_cast<std::size_t>(c)];
    }
    return out;
}

// ------------------------------------------------------------- configuration

struct TrainConfig {
    // loss weights
    double lambda_out = 0.001;
    double lambda_gtl = 0.1;
    double lambda_syn = 0.01;
    double lambda_feat = 0.1;
    double lambda_att_pos = 0.1;
    double lambda_att_cha = 0.1;
    double lambda_rec = 10.0;
    bool cycle_reconstruction = false;

    // alignment switches (ablations)
    bool align_output = true;
    bool align_feature = true;
    bool align_attention = true;

    // schedule
    double base_lr = 5e-3;
    double lr_power = 0.75;
    double momentum = 0.9;
    double disc_lr = 5e-5;
    double syn_lr = 2e-4;
    double syn_disc_lr = 2e-4;
    std::int64_t epochs = 150;
    std::int64_t syn_epochs = 150;
    std::int64_t batch_size = 8;
    std::int64_t checkpoint_every = 10;

    // architecture
    std::int64_t seg_base_width = 32;
    std::int64_t gen_base_width = 32;
    std::int64_t disc_base_width = 32;
    std::int64_t align_disc_width = 16;

    // data
    std::uint64_t seed = 0;
    std::int64_t num_classes = 4;
    std::int64_t image_height = 64;
    std::int64_t image_width = 64;

    void validate() const {
        auto positive = [](double v, const char* name) {
            if (!(v > 0.0) || !std::isfinite(v)) throw ConfigError(std::string(name) + " must be strictly positive");
        };
        positive(lambda_out, "lambda_out");
        positive(lambda_gtl, "lambda_gtl");
        positive(lambda_syn, "lambda_syn");
        positive(lambda_feat, "lambda_feat");
        positive(lambda_att_pos, "lambda_att_pos");
        positive(lambda_att_cha, "lambda_att_cha");
        positive(lambda_rec, "lambda_rec");
        positive(base_lr, "base_lr");
        positive(lr_power, "lr_power");
        positive(disc_lr, "disc_lr");
        positive(syn_lr, "syn_lr");
        positive(syn_disc_lr, "syn_disc_lr");
        if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("momentum must be in [0, 1)");
        if (epochs < 1) throw ConfigError("epochs must be >= 1");
        if (syn_epochs < 0) throw ConfigError("syn_epochs must be >= 0");
        if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
        if (checkpoint_every < 1) throw ConfigError("checkpoint_every must be >= 1");
        if (num_classes < 2) throw ConfigError("num_classes must be >= 2");
        if (image_height % 16 != 0 || image_width % 16 != 0 || image_height <= 0 || image_width <= 0) {
            throw ConfigError("image size must be a positive multiple of 16");
        }
        if (seg_base_width < 1 || gen_base_width < 1 || disc_base_width < 1 || align_disc_width < 1) {
            throw ConfigError("network widths must be >= 1");
        }
    }
};

enum class Stage { Synthesis = 1, Adaptation = 2 };

/// Named scalar loss components for one iteration plus their weighted total.
struct LossReport {
    std::map<std::string, double> components;
    std::int64_t iteration = 0;
    double total = 0.0;

    bool has(const std::string& name) const { return components.count(name) != 0; }
    double at(const std::string& name) const {
        auto it = components.find(name);
        if (it == components.end()) throw IncompleteReport("missing component " + name);
        return it->second;
    }
    void set(const std::string& name, double v) { components[name] = v; }

    friend bool operator==(const LossReport&, const LossReport&) = default;
};

namespace component {
inline constexpr const char* seg_s = "seg_s";
inline constexpr const char* seg_syn_s = "seg_syn_s";
inline constexpr const char* output_consis = "output_consis";
inline constexpr const char* feat_consis = "feat_consis";
inline constexpr const char* att_consis_pos = "att_consis_pos";
inline constexpr const char* att_consis_cha = "att_consis_cha";
inline constexpr const char* adv_feat_s = "adv_feat_s";
inline constexpr const char* adv_feat_t = "adv_feat_t";
inline constexpr const char* adv_att_s = "adv_att_s";
inline constexpr const char* adv_att_t = "adv_att_t";
inline constexpr const char* gen_syn = "gen_syn";
inline constexpr const char* disc_syn = "disc_syn";
}  // namespace component

}  // namespace bigl

#endif  // BIGL_DOMAIN_HPP
