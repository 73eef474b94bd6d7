// bigl: phantom generation, two-stage training, evaluation and reporting.
//
// Exit codes: 0 success, 2 usage or validation error, 3 runtime failure.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "bigl/checkpoint.hpp"
#include "bigl/config.hpp"
#include "bigl/data.hpp"
#include "bigl/evaluate.hpp"
#include "bigl/trainer.hpp"

#ifndef BIGL_CODE_HASH
#define BIGL_CODE_HASH "unknown"
#endif

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 2;
constexpr int kExitRuntime = 3;

/// Validation failures map to exit code 2; everything else raised while
/// running a command maps to 3.
struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

bool is_usage_error(const bigl::Error& e) {
    static const std::set<std::string> usage{"ConfigError", "IngestError", "IncompleteCase", "InsufficientCases",
                                             "LabelSchemeViolation"};
    return usage.count(e.kind()) != 0;
}

void check_device() {
    const char* dev = std::getenv("BIGL_DEVICE");
    if (dev && std::string(dev) != "cpu" && std::string(dev) != "") {
        throw UsageError(std::string("BIGL_DEVICE=") + dev + ": only 'cpu' is available in this build");
    }
}

bigl::LabelScheme parse_scheme(const std::string& s) {
    if (s == "brats") return bigl::LabelScheme::Brats;
    if (s == "cardiac") return bigl::LabelScheme::Cardiac;
    throw UsageError("unknown scheme '" + s + "' (brats|cardiac)");
}

bigl::Modality parse_modality(const std::string& s) {
    if (s == "A") return bigl::Modality::A;
    if (s == "B") return bigl::Modality::B;
    throw UsageError("unknown modality '" + s + "' (A|B)");
}

// ---------------------------------------------------------------- config

struct ConfigFlags {
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::optional<std::int64_t> epochs, syn_epochs, batch_size;
    std::vector<std::string> overrides;  // key=value

    void attach(CLI::App* cmd) {
        cmd->add_option("--config", config_path, "key = value config file");
        cmd->add_option("--seed", seed, "root seed (data split, init, shuffle sub-seeds)");
        cmd->add_option("--epochs", epochs, "stage-2 epochs");
        cmd->add_option("--syn-epochs", syn_epochs, "stage-1 epochs");
        cmd->add_option("--batch-size", batch_size, "batch size");
        cmd->add_option("--set", overrides, "override any config key: --set key=value");
    }

    /// Flag > config file > default, with every value's origin logged.
    bigl::TrainConfig resolve(bool strict = true) const {
        std::map<std::string, std::string> origin;
        for (const auto& f : bigl::config_fields()) origin[f.key] = "default";
        bigl::TrainConfig cfg;
        if (!config_path.empty()) {
            if (!fs::exists(config_path)) throw UsageError(config_path + ": config file not found");
            const bigl::TrainConfig defaults;
            cfg = bigl::load_config(config_path);
            for (const auto& f : bigl::config_fields()) {
                if (f.get(cfg) != f.get(defaults)) origin[f.key] = "config";
            }
        }
        auto flag = [&](const char* key, const std::string& value) {
            bigl::set_config_value(cfg, key, value);
            origin[key] = "flag";
        };
        if (seed) flag("seed", std::to_string(*seed));
        if (epochs) flag("epochs", std::to_string(*epochs));
        if (syn_epochs) flag("syn_epochs", std::to_string(*syn_epochs));
        if (batch_size) flag("batch_size", std::to_string(*batch_size));
        for (const auto& kv : overrides) {
            const auto eq = kv.find('=');
            if (eq == std::string::npos) throw UsageError("--set expects key=value, got '" + kv + "'");
            flag(kv.substr(0, eq).c_str(), kv.substr(eq + 1));
        }
        if (strict) cfg.validate();
        for (const auto& f : bigl::config_fields()) {
            std::cerr << "config: " << f.key << " = " << f.get(cfg) << " (" << origin[f.key] << ")\n";
        }
        return cfg;
    }
};

// --------------------------------------------------------------- manifest

json load_manifest(const fs::path& out) {
    const auto p = out / "manifest.json";
    if (!fs::exists(p)) return json::object();
    std::ifstream in(p);
    try {
        return json::parse(in);
    } catch (const json::exception&) {
        return json::object();
    }
}

void save_manifest(const fs::path& out, json m, const bigl::TrainConfig* cfg) {
    m["run_id"] = out.filename().string();
    m["code_hash"] = BIGL_CODE_HASH;
    if (cfg) {
        json c;
        for (const auto& f : bigl::config_fields()) c[f.key] = f.get(*cfg);
        m["config"] = c;
    }
    bigl::write_text_file(out / "manifest.json", m.dump(2) + "\n");
}

std::vector<std::string> list_checkpoints(const fs::path& dir) {
    std::vector<std::string> out;
    if (!fs::is_directory(dir)) return out;
    for (const auto& e : fs::directory_iterator(dir)) {
        if (e.path().extension() == ".ckpt") out.push_back(e.path().string());
    }
    std::sort(out.begin(), out.end());
    return out;
}

// --------------------------------------------------------------- data

struct LoadedData {
    std::vector<bigl::CaseRecord> cases;
    bigl::CaseSplits splits;
};

LoadedData load_data(const std::string& dir, const bigl::TrainConfig& cfg) {
    if (dir.empty() || !fs::is_directory(dir)) throw UsageError("data directory '" + dir + "' does not exist");
    LoadedData d;
    d.cases = bigl::load_cases(dir);
    d.splits = bigl::split_cases(d.cases, {}, bigl::sub_seed(cfg.seed, "data"));
    return d;
}

// --------------------------------------------------------------- commands

int cmd_phantom(const std::string& out, bigl::PhantomSpec spec) {
    spec.validate();
    bigl::generate_phantom(spec, out);
    json m = load_manifest(out);
    m["phantom"] = {{"cases", spec.n_cases},  {"image_size", spec.image_size}, {"depth", spec.depth},
                    {"seed", spec.seed},      {"noise", spec.noise},           {"gamma_b", spec.gamma_b},
                    {"pairing_manifest", (fs::path(out) / bigl::kPairingManifest).string()}};
    save_manifest(out, m, nullptr);
    std::cout << "phantom: " << spec.n_cases << " cases written to " << out << "\n";
    return kExitOk;
}

int cmd_train_syn(const ConfigFlags& flags, const std::string& data_dir, const fs::path& out, bool resume) {
    const auto cfg = flags.resolve();
    const auto data = load_data(data_dir, cfg);
    const auto td = bigl::make_training_data(data.splits, cfg, bigl::LabelScheme::Brats);
    fs::create_directories(out);
    bigl::write_text_file(out / "config.cfg", bigl::serialize_config(cfg));
    const auto dir = out / "stage1";
    auto r = bigl::train_stage1(cfg, td, {dir, resume});
    json m = load_manifest(out);
    m["stage1"] = {{"status", "complete"},
                   {"checkpoints", list_checkpoints(dir)},
                   {"log", fs::exists(dir / "train_log.jsonl") ? (dir / "train_log.jsonl").string() : ""}};
    save_manifest(out, m, &cfg);
    std::cout << (r.already_complete ? "stage 1 already complete" : "stage 1 done") << ": " << dir.string() << "\n";
    return kExitOk;
}

int cmd_train_uda(const ConfigFlags& flags, const std::string& data_dir, std::string stage1_dir, const fs::path& out,
                  bool source_only, bool resume) {
    const auto cfg = flags.resolve();
    const auto data = load_data(data_dir, cfg);
    std::unique_ptr<bigl::SynthesisModels> syn;
    if (!source_only) {
        if (stage1_dir.empty()) stage1_dir = (out / "stage1").string();
        const auto epoch = bigl::latest_complete_epoch(stage1_dir, bigl::stage1_networks());
        if (!epoch) throw UsageError("no complete stage-1 checkpoints in '" + stage1_dir + "'");
        syn = std::make_unique<bigl::SynthesisModels>(cfg, 0);
        bigl::load_stage1(stage1_dir, *epoch, *syn);
        syn->set_frozen(true);
    }
    const auto td = bigl::make_training_data(data.splits, cfg, bigl::LabelScheme::Brats);
    fs::create_directories(out);
    bigl::write_text_file(out / "config.cfg", bigl::serialize_config(cfg));
    const auto dir = out / "stage2";
    bigl::Stage2Options opt;
    opt.out_dir = dir;
    opt.source_only = source_only;
    opt.resume = resume;
    auto r = bigl::train_stage2(cfg, td, syn.get(), opt);

    json m = load_manifest(out);
    json st{{"status", "complete"},
            {"method", source_only ? "source_only" : "bigl"},
            {"networks", bigl::stage2_networks(source_only)},
            {"checkpoints", list_checkpoints(dir)},
            {"log", (dir / "train_log.jsonl").string()}};
    if (fs::exists(dir / "validation.jsonl")) st["validation_log"] = (dir / "validation.jsonl").string();
    if (r.best_validation_epoch) st["best_validation_epoch"] = *r.best_validation_epoch;
    if (!source_only) st["stage1"] = stage1_dir;
    m["stage2"] = st;
    save_manifest(out, m, &cfg);
    std::cout << (r.already_complete ? "stage 2 already complete" : "stage 2 done") << ": " << dir.string() << "\n";
    return kExitOk;
}

struct EvalFlags {
    std::string checkpoint, data_dir, split = "test", modality = "B", scheme = "brats", out;
    bool overlays = false, self_test = false;
};

fs::path latest_segnet(const fs::path& run) {
    const auto dir = run / "stage2";
    const auto e = bigl::latest_complete_epoch(dir, {"segnet"});
    if (!e) throw UsageError("no segnet checkpoint in " + dir.string());
    return bigl::checkpoint_path(dir, "segnet", *e);
}

int cmd_eval(const ConfigFlags& flags, EvalFlags ef) {
    ConfigFlags cf = flags;
    fs::path ckpt = ef.checkpoint;
    if (!ef.self_test) {
        if (ckpt.empty()) throw UsageError("--checkpoint is required unless --self-test is given");
        if (fs::is_directory(ckpt)) ckpt = latest_segnet(ckpt);
        if (!fs::exists(ckpt)) throw UsageError(ckpt.string() + ": checkpoint not found");
        const auto run_cfg = ckpt.parent_path().parent_path() / "config.cfg";
        if (cf.config_path.empty() && fs::exists(run_cfg)) cf.config_path = run_cfg.string();
    }
    const auto cfg = cf.resolve();
    const auto data = load_data(ef.data_dir, cfg);
    const std::vector<bigl::CaseRecord>* cases = nullptr;
    if (ef.split == "test") {
        cases = &data.splits.test;
    } else if (ef.split == "validation") {
        cases = &data.splits.validation;
    } else if (ef.split == "train") {
        cases = &data.splits.train;
    } else if (ef.split == "all") {
        cases = &data.cases;
    } else {
        throw UsageError("unknown split '" + ef.split + "' (train|validation|test|all)");
    }
    bigl::EvalOptions eo;
    eo.modality = parse_modality(ef.modality);
    eo.domain = eo.modality == bigl::Modality::A ? bigl::Domain::Source : bigl::Domain::Target;
    eo.scheme = parse_scheme(ef.scheme);
    eo.height = cfg.image_height;
    eo.width = cfg.image_width;
    eo.self_test = ef.self_test;
    std::unique_ptr<bigl::SegNet> net;
    if (!ef.self_test) net = bigl::load_segnet(ckpt, cfg);

    std::vector<bigl::CasePrediction> preds;
    const auto report = bigl::evaluate_cases(net.get(), *cases, eo, &preds);
    const fs::path out = ef.out;
    fs::create_directories(out);
    const auto table = bigl::format_metrics_table(report);
    bigl::write_text_file(out / "metrics.txt", table);
    bigl::write_text_file(out / "records.csv", bigl::format_case_records(report));
    json m = load_manifest(out);
    m["eval"] = {{"checkpoint", ckpt.string()}, {"split", ef.split},  {"modality", ef.modality},
                 {"scheme", ef.scheme},         {"self_test", ef.self_test},
                 {"table", (out / "metrics.txt").string()},      {"records", (out / "records.csv").string()}};
    if (ef.overlays) {
        fs::create_directories(out / "overlays");
        std::vector<std::string> files;
        for (const auto& p : preds) {
            const auto f = out / "overlays" / (p.case_id + ".ppm");
            bigl::write_overlay(f, p);
            files.push_back(f.string());
        }
        m["eval"]["overlays"] = files;
    }
    save_manifest(out, m, &cfg);
    std::cout << table;
    return kExitOk;
}

/// Method x region tables for DSC, HD95 and ASD; the best entry of each
/// column is wrapped in \textbf{}.
int cmd_report(const std::vector<std::string>& dirs, const std::vector<std::string>& names, const std::string& out) {
    if (dirs.empty()) throw UsageError("report needs at least one eval directory");
    if (!names.empty() && names.size() != dirs.size()) throw UsageError("--names must match the number of inputs");
    std::vector<bigl::MetricsReport> reports;
    for (const auto& d : dirs) {
        const fs::path p = fs::is_directory(d) ? fs::path(d) / "records.csv" : fs::path(d);
        if (!fs::exists(p)) throw UsageError(p.string() + ": no records (run eval first)");
        reports.push_back(bigl::read_case_records(p));
        if (reports.back().regions != reports.front().regions) {
            auto join = [](const std::vector<std::string>& v) {
                std::string s;
                for (const auto& x : v) s += (s.empty() ? "" : ",") + x;
                return s;
            };
            throw UsageError("region sets differ: " + dirs.front() + " has {" + join(reports.front().regions) + "}, " +
                             d + " has {" + join(reports.back().regions) + "}");
        }
    }
    const auto& regions = reports.front().regions;
    std::ostringstream os;
    struct Metric {
        const char* title;
        bool higher_better;
    };
    for (const Metric metric : {Metric{"DSC (%)", true}, Metric{"HD95 (mm)", false}, Metric{"ASD (mm)", false}}) {
        os << metric.title << "\n" << std::string(10, ' ');
        for (const auto& r : regions) os << " | " << r;
        os << "\n";
        std::vector<std::vector<std::optional<std::pair<double, double>>>> cells(reports.size());
        for (std::size_t i = 0; i < reports.size(); ++i) {
            for (const auto& region : regions) {
                const auto& s = reports[i].summary.at(region);
                std::optional<std::pair<double, double>> v;
                if (metric.title[0] == 'D') {
                    v = std::pair{s.dsc_mean, s.dsc_std};
                } else if (metric.title[0] == 'H' && s.hd95_mean) {
                    v = std::pair{*s.hd95_mean, *s.hd95_std};
                } else if (metric.title[0] == 'A' && s.asd_mean) {
                    v = std::pair{*s.asd_mean, *s.asd_std};
                }
                cells[i].push_back(v);
            }
        }
        for (std::size_t i = 0; i < reports.size(); ++i) {
            const std::string name = names.empty() ? fs::path(dirs[i]).filename().string() : names[i];
            char buf[32];
            std::snprintf(buf, sizeof(buf), "%-10s", name.c_str());
            os << buf;
            for (std::size_t c = 0; c < regions.size(); ++c) {
                const auto& v = cells[i][c];
                if (!v) {
                    os << " | N/A";
                    continue;
                }
                bool best = true;
                for (std::size_t k = 0; k < reports.size(); ++k) {
                    const auto& o = cells[k][c];
                    if (o && (metric.higher_better ? o->first > v->first : o->first < v->first)) best = false;
                }
                const auto cell = bigl::format_mean_std(v->first, v->second);
                os << " | " << (best && reports.size() > 1 ? "\\textbf{" + cell + "}" : cell);
            }
            os << "\n";
        }
        os << "\n";
    }
    if (!out.empty()) bigl::write_text_file(out, os.str());
    std::cout << os.str();
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Bidirectional global-to-local domain adaptation: phantom, training, evaluation"};
    app.require_subcommand(1);

    std::string out, data_dir, stage1_dir;
    bool resume = false, source_only = false;
    ConfigFlags flags;

    auto* phantom = app.add_subcommand("phantom", "generate the two-domain phantom dataset");
    bigl::PhantomSpec spec;
    phantom->add_option("--out", out, "output directory")->required();
    phantom->add_option("--cases", spec.n_cases, "number of cases");
    phantom->add_option("--size", spec.image_size, "image size (pixels)");
    phantom->add_option("--depth", spec.depth, "axial slices per case");
    phantom->add_option("--seed", spec.seed, "phantom seed");
    phantom->add_option("--noise", spec.noise, "Gaussian noise level");
    phantom->add_option("--min-lesions", spec.min_lesions);
    phantom->add_option("--max-lesions", spec.max_lesions);
    phantom->add_option("--min-radius", spec.min_radius, "pixels");
    phantom->add_option("--max-radius", spec.max_radius, "pixels");

    auto* train_syn = app.add_subcommand("train-syn", "stage 1: train the synthesis module");
    flags.attach(train_syn);
    train_syn->add_option("--data", data_dir, "dataset root")->required();
    train_syn->add_option("--out", out, "run directory")->required();
    train_syn->add_flag("--resume", resume, "continue from the last complete checkpoint");

    auto* train_uda = app.add_subcommand("train-uda", "stage 2: train segmentation with alignment");
    ConfigFlags uda_flags;
    uda_flags.attach(train_uda);
    train_uda->add_option("--data", data_dir, "dataset root")->required();
    train_uda->add_option("--stage1", stage1_dir, "stage-1 checkpoint directory (default <out>/stage1)");
    train_uda->add_option("--out", out, "run directory")->required();
    train_uda->add_flag("--source-only", source_only, "train the source-only baseline instead");
    train_uda->add_flag("--resume", resume, "continue from the last complete checkpoint");

    auto* eval = app.add_subcommand("eval", "evaluate a segmentation checkpoint");
    ConfigFlags eval_flags;
    eval_flags.attach(eval);
    EvalFlags ef;
    eval->add_option("--checkpoint", ef.checkpoint, "segnet checkpoint or run directory");
    eval->add_option("--data", ef.data_dir, "dataset root")->required();
    eval->add_option("--split", ef.split, "train|validation|test|all");
    eval->add_option("--modality", ef.modality, "A (source) or B (target)");
    eval->add_option("--scheme", ef.scheme, "brats|cardiac");
    eval->add_option("--out", ef.out, "output directory")->required();
    eval->add_flag("--overlays", ef.overlays, "write PPM overlays");
    eval->add_flag("--self-test", ef.self_test, "score ground truth against itself");

    auto* report = app.add_subcommand("report", "compare evaluated runs");
    std::vector<std::string> inputs, names;
    std::string report_out;
    report->add_option("inputs", inputs, "eval directories or records.csv files");
    report->add_option("--names", names, "row labels, one per input");
    report->add_option("--out", report_out, "write the table to this file");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? kExitOk : kExitUsage;
    }

    try {
        check_device();
        if (*phantom) return cmd_phantom(out, spec);
        if (*train_syn) return cmd_train_syn(flags, data_dir, out, resume);
        if (*train_uda) return cmd_train_uda(uda_flags, data_dir, stage1_dir, out, source_only, resume);
        if (*eval) return cmd_eval(eval_flags, ef);
        if (*report) return cmd_report(inputs, names, report_out);
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const bigl::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return is_usage_error(e) ? kExitUsage : kExitRuntime;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitRuntime;
    }
    return kExitUsage;
}
