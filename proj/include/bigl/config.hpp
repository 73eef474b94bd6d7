#ifndef BIGL_CONFIG_HPP
#define BIGL_CONFIG_HPP

// Key=value config files: one key per TrainConfig field, '#' comments,
// blank lines ignored. Unknown keys and malformed values are errors.

#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "bigl/domain.hpp"
#include "bigl/nn.hpp"

namespace bigl {

namespace detail {

struct ConfigField {
    const char* key;
    std::function<std::string(const TrainConfig&)> get;
    std::function<void(TrainConfig&, const std::string&)> set;
};

inline std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

inline double parse_double(const std::string& key, const std::string& s) {
    double v = 0.0;
    const auto* end = s.data() + s.size();
    auto [p, ec] = std::from_chars(s.data(), end, v);
    if (ec != std::errc() || p != end) throw ConfigError(key + ": not a number: '" + s + "'");
    return v;
}

inline std::int64_t parse_int(const std::string& key, const std::string& s) {
    std::int64_t v = 0;
    const auto* end = s.data() + s.size();
    auto [p, ec] = std::from_chars(s.data(), end, v);
    if (ec != std::errc() || p != end) throw ConfigError(key + ": not an integer: '" + s + "'");
    return v;
}

inline bool parse_bool(const std::string& key, const std::string& s) {
    if (s == "true" || s == "1") return true;
    if (s == "false" || s == "0") return false;
    throw ConfigError(key + ": not a boolean: '" + s + "'");
}

template <class M>
ConfigField field(const char* key, M TrainConfig::*member) {
    using T = std::remove_cvref_t<decltype(std::declval<TrainConfig>().*member)>;
    ConfigField f{key, nullptr, nullptr};
    if constexpr (std::is_same_v<T, bool>) {
        f.get = [member](const TrainConfig& c) { return std::string(c.*member ? "true" : "false"); };
        f.set = [member, key](TrainConfig& c, const std::string& s) { c.*member = parse_bool(key, s); };
    } else if constexpr (std::is_floating_point_v<T>) {
        f.get = [member](const TrainConfig& c) { return format_double(c.*member); };
        f.set = [member, key](TrainConfig& c, const std::string& s) { c.*member = parse_double(key, s); };
    } else if constexpr (std::is_same_v<T, std::uint64_t>) {
        f.get = [member](const TrainConfig& c) { return std::to_string(c.*member); };
        f.set = [member, key](TrainConfig& c, const std::string& s) {
            const auto v = parse_int(key, s);
            if (v < 0) throw ConfigError(std::string(key) + " must be nonnegative");
            c.*member = static_cast<std::uint64_t>(v);
        };
    } else {
        f.get = [member](const TrainConfig& c) { return std::to_string(c.*member); };
        f.set = [member, key](TrainConfig& c, const std::string& s) { c.*member = parse_int(key, s); };
    }
    return f;
}

}  // namespace detail

inline const std::vector<detail::ConfigField>& config_fields() {
    using detail::field;
    static const std::vector<detail::ConfigField> fields{
        field("lambda_out", &TrainConfig::lambda_out),
        field("lambda_gtl", &TrainConfig::lambda_gtl),
        field("lambda_syn", &TrainConfig::lambda_syn),
        field("lambda_feat", &TrainConfig::lambda_feat),
        field("lambda_att_pos", &TrainConfig::lambda_att_pos),
        field("lambda_att_cha", &TrainConfig::lambda_att_cha),
        field("lambda_rec", &TrainConfig::lambda_rec),
        field("cycle_reconstruction", &TrainConfig::cycle_reconstruction),
        field("align_output", &TrainConfig::align_output),
        field("align_feature", &TrainConfig::align_feature),
        field("align_attention", &TrainConfig::align_attention),
        field("base_lr", &TrainConfig::base_lr),
        field("lr_power", &TrainConfig::lr_power),
        field("momentum", &TrainConfig::momentum),
        field("disc_lr", &TrainConfig::disc_lr),
        field("syn_lr", &TrainConfig::syn_lr),
        field("syn_disc_lr", &TrainConfig::syn_disc_lr),
        field("epochs", &TrainConfig::epochs),
        field("syn_epochs", &TrainConfig::syn_epochs),
        field("batch_size", &TrainConfig::batch_size),
        field("checkpoint_every", &TrainConfig::checkpoint_every),
        field("seg_base_width", &TrainConfig::seg_base_width),
        field("gen_base_width", &TrainConfig::gen_base_width),
        field("disc_base_width", &TrainConfig::disc_base_width),
        field("align_disc_width", &TrainConfig::align_disc_width),
        field("seed", &TrainConfig::seed),
        field("num_classes", &TrainConfig::num_classes),
        field("image_height", &TrainConfig::image_height),
        field("image_width", &TrainConfig::image_width),
    };
    return fields;
}

inline bool is_config_key(const std::string& key) {
    for (const auto& f : config_fields()) {
        if (key == f.key) return true;
    }
    return false;
}

inline void set_config_value(TrainConfig& cfg, const std::string& key, const std::string& value) {
    for (const auto& f : config_fields()) {
        if (key == f.key) {
            f.set(cfg, value);
            return;
        }
    }
    throw ConfigError("unknown config key '" + key + "'");
}

inline std::string get_config_value(const TrainConfig& cfg, const std::string& key) {
    for (const auto& f : config_fields()) {
        if (key == f.key) return f.get(cfg);
    }
    throw ConfigError("unknown config key '" + key + "'");
}

/// Every field, one `key = value` line each, in schema order.
inline std::string serialize_config(const TrainConfig& cfg) {
    std::string out;
    for (const auto& f : config_fields()) out += std::string(f.key) + " = " + f.get(cfg) + "\n";
    return out;
}

inline std::uint64_t config_hash(const TrainConfig& cfg) { return sub_seed(0, serialize_config(cfg)); }

/// Applies `key = value` lines on top of `base`.
inline TrainConfig parse_config(const std::string& text, TrainConfig base = {}) {
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    auto trim = [](std::string s) {
        const auto b = s.find_first_not_of(" \t\r");
        if (b == std::string::npos) return std::string();
        const auto e = s.find_last_not_of(" \t\r");
        return s.substr(b, e - b + 1);
    };
    while (std::getline(in, line)) {
        ++lineno;
        if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
        set_config_value(base, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    return base;
}

inline TrainConfig load_config(const std::filesystem::path& path, TrainConfig base = {}) {
    std::ifstream in(path);
    if (!in) throw ConfigError(path.string() + ": cannot open config");
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config(ss.str(), base);
}

}  // namespace bigl

#endif  // BIGL_CONFIG_HPP
