#ifndef BIGL_TRAINER_HPP
#define BIGL_TRAINER_HPP

// Two-stage training. Stage 1 fits the synthesis module; stage 2 freezes it
// and trains the segmentation network with output, feature and attention
// alignment, updating the backbone first and the alignment discriminators
// second within each iteration.
//
// Checkpoints: <out>/{stage1,stage2}/<net>_<epoch>.ckpt
// Logs:        <out>/<stage>/train_log.jsonl, one JSON object per iteration

#include <array>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "bigl/checkpoint.hpp"
#include "bigl/config.hpp"
#include "bigl/data.hpp"
#include "bigl/evaluate.hpp"
#include "bigl/gtl.hpp"
#include "bigl/optim.hpp"
#include "bigl/segnet.hpp"
#include "bigl/synthesis.hpp"

namespace bigl {

namespace fs = std::filesystem;

/// Unpaired training streams plus the cases used for validation.
struct TrainingData {
    SliceStream source;  // labeled, source modality
    SliceStream target;  // unlabeled, target modality, opaque ids
    std::vector<CaseRecord> validation;
    EvalOptions validation_eval;  // source-domain settings
};

/// Builds the training streams from split cases. Source and target streams
/// shuffle independently; the target stream carries no labels or case ids.
inline TrainingData make_training_data(const CaseSplits& splits, const TrainConfig& cfg, LabelScheme scheme,
                                       Modality source = Modality::A, Modality target = Modality::B) {
    StreamOptions so;
    so.modality = source;
    so.domain = Domain::Source;
    so.with_labels = true;
    so.scheme = scheme;
    so.height = cfg.image_height;
    so.width = cfg.image_width;
    StreamOptions to = so;
    to.modality = target;
    to.domain = Domain::Target;
    to.with_labels = false;
    to.anonymize = true;
    TrainingData d{make_slice_stream(splits.train, so, sub_seed(cfg.seed, "shuffle.source")),
                   make_slice_stream(splits.train, to, sub_seed(cfg.seed, "shuffle.target")), splits.validation, {}};
    d.validation_eval = {source, Domain::Source, scheme, cfg.image_height, cfg.image_width, false};
    return d;
}

inline std::int64_t batches_per_epoch(std::size_t n, std::int64_t batch_size) {
    if (n == 0) throw EmptyEpoch("training stream is empty");
    return std::max<std::int64_t>(1, static_cast<std::int64_t>(n) / batch_size);
}

/// Index pairs for one epoch: source items in shuffled order, target items
/// paired by position in their own, independent shuffle.
struct EpochPlan {
    std::vector<std::vector<std::size_t>> source, target;
};

inline EpochPlan plan_epoch(const SliceStream& source, const SliceStream& target, std::int64_t epoch,
                            std::int64_t batch_size) {
    const auto n_batches = batches_per_epoch(source.size(), batch_size);
    if (target.empty()) throw EmptyEpoch("target stream is empty");
    const auto os = source.epoch_order(epoch), ot = target.epoch_order(epoch);
    const auto b = std::min<std::int64_t>(batch_size, static_cast<std::int64_t>(source.size()));
    EpochPlan plan;
    for (std::int64_t k = 0; k < n_batches; ++k) {
        std::vector<std::size_t> s, t;
        for (std::int64_t j = 0; j < b; ++j) {
            const auto pos = static_cast<std::size_t>(k * b + j);
            s.push_back(os[pos]);
            t.push_back(ot[pos % ot.size()]);
        }
        plan.source.push_back(std::move(s));
        plan.target.push_back(std::move(t));
    }
    return plan;
}

inline Tensor gather_images(const SliceStream& stream, const std::vector<std::size_t>& idx) {
    std::vector<Slice2D> slices;
    slices.reserve(idx.size());
    for (auto i : idx) slices.push_back(stream[i].slice);
    return to_network_tensor(slices);
}

inline std::vector<std::int32_t> gather_labels(const SliceStream& stream, const std::vector<std::size_t>& idx) {
    std::vector<LabelMask> masks;
    for (auto i : idx) {
        if (!stream[i].label) throw IncompleteCase("labeled stream item without a label");
        masks.push_back(*stream[i].label);
    }
    return stack_labels(masks);
}

/// JSON object of a report (all components, iteration, total, extras).
inline nlohmann::json report_json(const LossReport& r) {
    nlohmann::json j;
    j["iteration"] = r.iteration;
    for (const auto& [k, v] : r.components) j[k] = v;
    j["total"] = r.total;
    return j;
}

class JsonlLog {
public:
    JsonlLog() = default;
    JsonlLog(const fs::path& path, bool append) {
        std::error_code ec;
        fs::create_directories(path.parent_path(), ec);
        out_.open(path, append ? std::ios::app : std::ios::trunc);
        if (!out_) throw CheckpointWriteError(path.string() + ": cannot open log");
    }
    void write(const nlohmann::json& j) {
        if (out_.is_open()) out_ << j.dump() << '\n';
    }
    void flush() {
        if (out_.is_open()) out_.flush();
    }

private:
    std::ofstream out_;
};

inline fs::path checkpoint_path(const fs::path& dir, const std::string& net, std::int64_t epoch) {
    return dir / (net + "_" + std::to_string(epoch) + ".ckpt");
}

/// Largest epoch for which every named network has a checkpoint, if any.
inline std::optional<std::int64_t> latest_complete_epoch(const fs::path& dir, const std::vector<std::string>& nets) {
    if (!fs::is_directory(dir)) return std::nullopt;
    std::optional<std::int64_t> best;
    const std::string first = nets.front() + "_";
    for (const auto& e : fs::directory_iterator(dir)) {
        const auto name = e.path().filename().string();
        if (name.rfind(first, 0) != 0 || e.path().extension() != ".ckpt") continue;
        const auto num = name.substr(first.size(), name.size() - first.size() - 5);
        if (num.empty() || num.find_first_not_of("0123456789") != std::string::npos) continue;
        const auto epoch = std::stoll(num);
        bool all = true;
        for (const auto& n : nets) all = all && fs::exists(checkpoint_path(dir, n, epoch));
        if (all && (!best || epoch > *best)) best = epoch;
    }
    return best;
}

// ------------------------------------------------------------------ stage 1

inline constexpr const char* kGeneratorKind = "generator";
inline constexpr const char* kImageDiscKind = "image_disc";
inline constexpr const char* kSegNetKind = "segnet";
inline constexpr const char* kAlignDiscKind = "disc";

inline const std::vector<std::string>& stage1_networks() {
    static const std::vector<std::string> nets{"g_st", "g_ts", "d_source", "d_target"};
    return nets;
}

struct Stage1Options {
    std::optional<fs::path> out_dir;  // stage1 directory; nothing written when absent
    bool resume = false;
};

struct Stage1Result {
    std::unique_ptr<SynthesisModels> models;
    std::vector<LossReport> reports;
    std::int64_t start_epoch = 0;  // > 0 when resumed
    bool already_complete = false;
};

namespace detail {

struct Stage1Slots {
    const char* name;
    Module* module;
    Optimizer* opt;
    const char* kind;
    const char* tag;
};

inline std::array<Stage1Slots, 4> stage1_slots(SynthesisModels& m, SynthesisOptimizers& o) {
    return {{{"g_st", &m.g_st, &o.g_st, kGeneratorKind, "S_TO_T"},
             {"g_ts", &m.g_ts, &o.g_ts, kGeneratorKind, "T_TO_S"},
             {"d_source", &m.d_source, &o.d_source, kImageDiscKind, "SOURCE"},
             {"d_target", &m.d_target, &o.d_target, kImageDiscKind, "TARGET"}}};
}

}  // namespace detail

inline void save_stage1(const fs::path& dir, SynthesisModels& m, SynthesisOptimizers& o, std::int64_t epoch,
                        std::int64_t iteration, const TrainConfig& cfg) {
    for (const auto& s : detail::stage1_slots(m, o)) {
        write_checkpoint(checkpoint_path(dir, s.name, epoch),
                         make_checkpoint(*s.module, {s.kind, s.tag, epoch, iteration, config_hash(cfg)}, s.opt));
    }
}

/// Loads generators (and discriminators) of a stage-1 epoch into `m`.
inline void load_stage1(const fs::path& dir, std::int64_t epoch, SynthesisModels& m,
                        SynthesisOptimizers* o = nullptr) {
    const auto& nets = stage1_networks();
    std::array<Module*, 4> mods{&m.g_st, &m.g_ts, &m.d_source, &m.d_target};
    std::array<Optimizer*, 4> opts{};
    if (o) opts = {&o->g_st, &o->g_ts, &o->d_source, &o->d_target};
    for (std::size_t i = 0; i < 4; ++i) {
        const auto ckpt = read_checkpoint(checkpoint_path(dir, nets[i], epoch));
        load_checkpoint(ckpt, *mods[i], i < 2 ? kGeneratorKind : kImageDiscKind, opts[i]);
    }
}

/// Trains both generators and image discriminators for cfg.syn_epochs.
/// With syn_epochs = 0 the initialization is checkpointed as epoch 0.
inline Stage1Result train_stage1(const TrainConfig& cfg, const TrainingData& data, const Stage1Options& opt = {}) {
    if (cfg.syn_epochs < 0) throw ConfigError("syn_epochs must be >= 0");
    Stage1Result result;
    result.models = std::make_unique<SynthesisModels>(cfg, sub_seed(cfg.seed, "init.synthesis"));
    auto& m = *result.models;
    SynthesisOptimizers o(m, cfg);
    const auto n_batches = batches_per_epoch(data.source.size(), cfg.batch_size);

    std::int64_t start = 0;
    if (opt.resume && opt.out_dir) {
        if (auto e = latest_complete_epoch(*opt.out_dir, stage1_networks())) {
            load_stage1(*opt.out_dir, *e, m, &o);
            start = *e;
            if (start >= cfg.syn_epochs) {
                result.start_epoch = start;
                result.already_complete = true;
                return result;
            }
        }
    }
    result.start_epoch = start;
    if (cfg.syn_epochs == 0) {
        if (opt.out_dir) save_stage1(*opt.out_dir, m, o, 0, 0, cfg);
        return result;
    }

    JsonlLog log;
    if (opt.out_dir) log = JsonlLog(*opt.out_dir / "train_log.jsonl", start > 0);
    for (std::int64_t epoch = start; epoch < cfg.syn_epochs; ++epoch) {
        const auto plan = plan_epoch(data.source, data.target, epoch, cfg.batch_size);
        for (std::size_t k = 0; k < plan.source.size(); ++k) {
            const auto iteration = epoch * n_batches + static_cast<std::int64_t>(k);
            LossReport r;
            try {
                r = synthesis_step(m, o, gather_images(data.source, plan.source[k]),
                                   gather_images(data.target, plan.target[k]), cfg);
            } catch (const NonFiniteLoss& e) {
                throw NonFiniteLoss("stage 1 epoch " + std::to_string(epoch) + " iteration " +
                                    std::to_string(iteration) + ": " + e.what());
            } catch (const NonFiniteActivation& e) {
                throw NonFiniteLoss("stage 1 epoch " + std::to_string(epoch) + " iteration " +
                                    std::to_string(iteration) + ": diverged, " + e.what());
            }
            r.iteration = iteration;
            auto j = report_json(r);
            j["stage"] = 1;
            j["epoch"] = epoch;
            j["lr_gen"] = o.g_st.state.learning_rate;
            j["lr_disc"] = o.d_source.state.learning_rate;
            log.write(j);
            result.reports.push_back(std::move(r));
        }
        log.flush();
        const auto done = epoch + 1;
        if (opt.out_dir && (done % cfg.checkpoint_every == 0 || done == cfg.syn_epochs)) {
            save_stage1(*opt.out_dir, m, o, done, done * n_batches, cfg);
        }
    }
    return result;
}

// ------------------------------------------------------------------ stage 2

/// Source/target discriminators for the feature, position-map and
/// channel-map levels.
struct AlignmentModels {
    AlignmentDiscriminator feat_s, feat_t, pos_s, pos_t, cha_s, cha_t;

    AlignmentModels(const TrainConfig& cfg, std::int64_t bottleneck_channels, std::uint64_t seed)
        : feat_s(AlignmentLevel::Feature, Domain::Source, {bottleneck_channels, cfg.align_disc_width, 3},
                 sub_seed(seed, "feat_s")),
          feat_t(AlignmentLevel::Feature, Domain::Target, {bottleneck_channels, cfg.align_disc_width, 3},
                 sub_seed(seed, "feat_t")),
          pos_s(AlignmentLevel::AttentionPosition, Domain::Source, {1, cfg.align_disc_width, 3}, sub_seed(seed, "pos_s")),
          pos_t(AlignmentLevel::AttentionPosition, Domain::Target, {1, cfg.align_disc_width, 3}, sub_seed(seed, "pos_t")),
          cha_s(AlignmentLevel::AttentionChannel, Domain::Source, {1, cfg.align_disc_width, 3}, sub_seed(seed, "cha_s")),
          cha_t(AlignmentLevel::AttentionChannel, Domain::Target, {1, cfg.align_disc_width, 3}, sub_seed(seed, "cha_t")) {}

    DiscriminatorPair pair(AlignmentLevel level) {
        switch (level) {
            case AlignmentLevel::Feature: return {&feat_s, &feat_t};
            case AlignmentLevel::AttentionPosition: return {&pos_s, &pos_t};
            case AlignmentLevel::AttentionChannel: return {&cha_s, &cha_t};
        }
        return {&feat_s, &feat_t};
    }

    std::array<AlignmentDiscriminator*, 6> all() { return {&feat_s, &feat_t, &pos_s, &pos_t, &cha_s, &cha_t}; }

    static const std::array<const char*, 6>& names() {
        static const std::array<const char*, 6> n{"disc_feat_s", "disc_feat_t", "disc_pos_s",
                                                  "disc_pos_t", "disc_cha_s", "disc_cha_t"};
        return n;
    }

    void set_frozen(bool f) {
        for (auto* d : all()) d->set_frozen(f);
    }

    std::uint64_t hash() const {
        std::uint64_t h = 0;
        std::uint64_t k = 1;
        for (const auto* d : {&feat_s, &feat_t, &pos_s, &pos_t, &cha_s, &cha_t}) h ^= d->parameter_hash() * (k += 2);
        return h;
    }
};

struct Stage2Options {
    std::optional<fs::path> out_dir;  // stage2 directory; nothing written when absent
    bool source_only = false;
    bool resume = false;
    /// Stop after this many iterations (contract checks); < 0 runs all epochs.
    std::int64_t iteration_limit = -1;
    /// Evaluate source-domain validation DSC at each checkpoint epoch.
    bool validate = true;
};

struct ValidationRecord {
    std::int64_t epoch = 0;
    double dsc_wt = 0.0;
};

struct Stage2Result {
    std::unique_ptr<SegNet> net;
    std::unique_ptr<AlignmentModels> discs;  // null for the source-only baseline
    std::vector<LossReport> reports;
    std::vector<ValidationRecord> validation;
    std::optional<std::int64_t> best_validation_epoch;
    bool already_complete = false;
};

/// Synthesized counterparts of every stream item, computed once: the
/// synthesis module is frozen, so x_{s->t} and x_{t->s} are fixed per slice.
struct SynthesisCache {
    std::vector<Tensor> source_to_target;  // per source item, [1,1,H,W]
    std::vector<Tensor> target_to_source;  // per target item

    static SynthesisCache build(const SynthesisModels& m, const TrainingData& data) {
        NoGradGuard no_grad;
        SynthesisCache c;
        auto run = [](const GeneratorNet& g, const SliceStream& s, std::vector<Tensor>& out) {
            constexpr std::size_t kChunk = 16;
            for (std::size_t i0 = 0; i0 < s.size(); i0 += kChunk) {
                std::vector<std::size_t> idx;
                for (std::size_t i = i0; i < std::min(s.size(), i0 + kChunk); ++i) idx.push_back(i);
                const Tensor y = g.forward(gather_images(s, idx));
                for (std::size_t j = 0; j < idx.size(); ++j) {
                    out.push_back(slice_batch(y, static_cast<std::int64_t>(j), 1));
                }
            }
        };
        run(m.g_st, data.source, c.source_to_target);
        run(m.g_ts, data.target, c.target_to_source);
        return c;
    }

    static Tensor gather(const std::vector<Tensor>& items, const std::vector<std::size_t>& idx) {
        std::vector<Tensor> parts;
        for (auto i : idx) parts.push_back(items[i]);
        return concat_batch(parts);
    }
};

namespace detail {

inline void require_finite(LossReport& r, std::int64_t epoch) {
    for (const auto& [k, v] : r.components) {
        if (!std::isfinite(v)) {
            throw NonFiniteLoss("epoch " + std::to_string(epoch) + " iteration " + std::to_string(r.iteration) +
                                ": component " + k + " = " + std::to_string(v));
        }
    }
}

inline StreamRepresentations split_streams(const SegOutput& o, std::int64_t b) {
    StreamRepresentations reps;
    for (std::int64_t k = 0; k < 4; ++k) {
        const auto i = static_cast<std::size_t>(k);
        reps.features[i] = slice_batch(o.features, k * b, b);
        reps.position_maps[i] = slice_batch(o.attention.position_map, k * b, b);
        reps.channel_maps[i] = slice_batch(o.attention.channel_map, k * b, b);
    }
    return reps;
}

}  // namespace detail

/// One stage-2 iteration: backbone step (segmentation on x_s and x_{s->t},
/// output consistency, feature/attention consistency against frozen
/// discriminators), then one discriminator step on the detached,
/// pre-update representations.
inline LossReport uda_step(SegNet& net, Sgd& net_opt, AlignmentModels& discs, std::array<Adam*, 6> disc_opts,
                           const Tensor& x_s, const std::vector<std::int32_t>& y_s, const Tensor& x_t,
                           const Tensor& x_s2t, const Tensor& x_t2s, const TrainConfig& cfg) {
    using namespace component;
    const auto b = x_s.dim(0);
    LossReport r;

    discs.set_frozen(true);
    net.set_frozen(false);
    const SegOutput o = net.forward(concat_batch({x_s, x_t, x_s2t, x_t2s}));
    const StreamRepresentations reps = detail::split_streams(o, b);
    auto logits = [&](Stream s) { return slice_batch(o.logits, static_cast<std::int64_t>(s) * b, b); };

    const Tensor l_seg_s = segmentation_loss(logits(Stream::Source), y_s);
    const Tensor l_seg_syn = segmentation_loss(logits(Stream::SourceToTarget), y_s);
    Tensor backbone = add(l_seg_s, l_seg_syn);
    r.set(seg_s, l_seg_s.item());
    r.set(seg_syn_s, l_seg_syn.item());
    if (cfg.align_output) {
        const Tensor l_out = output_consistency(softmax_channels(logits(Stream::Target)),
                                                softmax_channels(logits(Stream::TargetToSource)));
        backbone = add(backbone, scale(l_out, cfg.lambda_out));
        r.set(output_consis, l_out.item());
    }
    if (cfg.align_feature) {
        const Tensor l = feature_consistency_loss(reps, discs.pair(AlignmentLevel::Feature));
        backbone = add(backbone, scale(l, cfg.lambda_feat));
        r.set(feat_consis, l.item());
    }
    if (cfg.align_attention) {
        const Tensor lp = attention_consistency_loss(reps, AlignmentLevel::AttentionPosition,
                                                     discs.pair(AlignmentLevel::AttentionPosition));
        const Tensor lc = attention_consistency_loss(reps, AlignmentLevel::AttentionChannel,
                                                     discs.pair(AlignmentLevel::AttentionChannel));
        backbone = add(backbone, add(scale(lp, cfg.lambda_att_pos), scale(lc, cfg.lambda_att_cha)));
        r.set(att_consis_pos, lp.item());
        r.set(att_consis_cha, lc.item());
    }
    if (!all_finite(backbone)) throw NonFiniteLoss("backbone objective is not finite");
    backbone.backward();
    net_opt.step();
    discs.set_frozen(false);

    if (cfg.align_feature || cfg.align_attention) {
        net.set_frozen(true);
        Tensor disc_total;
        auto accumulate = [&](const Tensor& t) { disc_total = disc_total.defined() ? add(disc_total, t) : t; };
        if (cfg.align_feature) {
            const auto a = feature_adversarial_losses(reps, discs.pair(AlignmentLevel::Feature));
            accumulate(add(a.source, a.target));
            r.set(adv_feat_s, a.source.item());
            r.set(adv_feat_t, a.target.item());
        }
        if (cfg.align_attention) {
            const auto p = attention_adversarial_losses(reps, AlignmentLevel::AttentionPosition,
                                                        discs.pair(AlignmentLevel::AttentionPosition));
            const auto c = attention_adversarial_losses(reps, AlignmentLevel::AttentionChannel,
                                                        discs.pair(AlignmentLevel::AttentionChannel));
            accumulate(add(add(p.source, p.target), add(c.source, c.target)));
            r.set(adv_att_s, 0.5 * (p.source.item() + c.source.item()));
            r.set(adv_att_t, 0.5 * (p.target.item() + c.target.item()));
        }
        if (!all_finite(disc_total)) throw NonFiniteLoss("discriminator objective is not finite");
        disc_total.backward();
        for (auto* opt : disc_opts) opt->step();
        net.set_frozen(false);
    }
    r.total = weighted_total(r, cfg);
    return r;
}

/// Source-only iteration: segmentation loss on labeled source images.
inline LossReport source_only_step(SegNet& net, Sgd& opt, const Tensor& x_s, const std::vector<std::int32_t>& y_s,
                                   const TrainConfig& cfg) {
    net.set_frozen(false);
    const Tensor l = segmentation_loss(net.forward(x_s).logits, y_s);
    if (!all_finite(l)) throw NonFiniteLoss("segmentation loss is not finite");
    l.backward();
    opt.step();
    LossReport r;
    r.set(component::seg_s, l.item());
    r.total = weighted_total(r, cfg);
    return r;
}

inline SegNetConfig segnet_config(const TrainConfig& cfg) {
    return {cfg.seg_base_width, cfg.num_classes, cfg.image_height, cfg.image_width};
}

inline std::vector<std::string> stage2_networks(bool source_only) {
    std::vector<std::string> nets{"segnet"};
    if (!source_only) {
        for (const auto* n : AlignmentModels::names()) nets.emplace_back(n);
    }
    return nets;
}

/// Stage 2 (or the source-only baseline when `synthesis` is null and
/// opt.source_only is set). The synthesis module must be frozen throughout;
/// its parameter hash is verified after every epoch.
inline Stage2Result train_stage2(const TrainConfig& cfg, const TrainingData& data, const SynthesisModels* synthesis,
                                 const Stage2Options& opt = {}) {
    if (cfg.epochs < 0) throw ConfigError("epochs must be >= 0");
    if (cfg.base_lr < 0.0 || cfg.disc_lr < 0.0) throw ConfigError("learning rates must be >= 0");
    if (!opt.source_only && !synthesis) throw ConfigError("stage 2 needs trained synthesis models");

    Stage2Result result;
    result.net = std::make_unique<SegNet>(segnet_config(cfg), sub_seed(cfg.seed, "init.segnet"));
    SegNet& net = *result.net;
    Sgd net_opt(net, cfg.base_lr, cfg.momentum);
    std::vector<std::unique_ptr<Adam>> disc_opts;
    std::array<Adam*, 6> disc_opt_ptrs{};
    if (!opt.source_only) {
        result.discs = std::make_unique<AlignmentModels>(cfg, net.bottleneck_channels(), sub_seed(cfg.seed, "init.align"));
        auto all = result.discs->all();
        for (std::size_t i = 0; i < all.size(); ++i) {
            disc_opts.push_back(std::make_unique<Adam>(*all[i], cfg.disc_lr));
            disc_opt_ptrs[i] = disc_opts.back().get();
        }
    }

    const auto n_batches = batches_per_epoch(data.source.size(), cfg.batch_size);
    const auto max_iter = std::max<std::int64_t>(1, cfg.epochs * n_batches);
    const auto nets = stage2_networks(opt.source_only);
    const auto hash = config_hash(cfg);

    auto save = [&](std::int64_t epoch, std::int64_t iteration) {
        if (!opt.out_dir) return;
        write_checkpoint(checkpoint_path(*opt.out_dir, "segnet", epoch),
                         make_checkpoint(net, {kSegNetKind, opt.source_only ? "SOURCE_ONLY" : "BIGL", epoch, iteration, hash},
                                         &net_opt));
        if (result.discs) {
            auto all = result.discs->all();
            for (std::size_t i = 0; i < all.size(); ++i) {
                const std::string tag = std::string(to_string(all[i]->level())) + "/" + to_string(all[i]->domain());
                write_checkpoint(checkpoint_path(*opt.out_dir, AlignmentModels::names()[i], epoch),
                                 make_checkpoint(*all[i], {kAlignDiscKind, tag, epoch, iteration, hash}, disc_opt_ptrs[i]));
            }
        }
    };

    std::int64_t start = 0;
    if (opt.resume && opt.out_dir) {
        if (auto e = latest_complete_epoch(*opt.out_dir, nets)) {
            load_checkpoint(read_checkpoint(checkpoint_path(*opt.out_dir, "segnet", *e)), net, kSegNetKind, &net_opt);
            if (result.discs) {
                auto all = result.discs->all();
                for (std::size_t i = 0; i < all.size(); ++i) {
                    load_checkpoint(read_checkpoint(checkpoint_path(*opt.out_dir, AlignmentModels::names()[i], *e)),
                                    *all[i], kAlignDiscKind, disc_opt_ptrs[i]);
                }
            }
            start = *e;
            if (start >= cfg.epochs) {
                result.already_complete = true;
                return result;
            }
        }
    }
    if (cfg.epochs == 0) {
        save(0, 0);
        return result;
    }

    std::optional<SynthesisCache> cache;
    std::uint64_t syn_hash = 0;
    if (!opt.source_only) {
        syn_hash = synthesis->hash();
        cache = SynthesisCache::build(*synthesis, data);
        if (synthesis->hash() != syn_hash) throw FrozenContractViolation("synthesis parameters changed while caching");
    }

    JsonlLog log, val_log;
    if (opt.out_dir) {
        log = JsonlLog(*opt.out_dir / "train_log.jsonl", start > 0);
        val_log = JsonlLog(*opt.out_dir / "validation.jsonl", start > 0);
    }
    double best_val = -1.0;
    for (std::int64_t epoch = start; epoch < cfg.epochs; ++epoch) {
        const auto plan = plan_epoch(data.source, data.target, epoch, cfg.batch_size);
        for (std::size_t k = 0; k < plan.source.size(); ++k) {
            const auto iteration = epoch * n_batches + static_cast<std::int64_t>(k);
            if (opt.iteration_limit >= 0 && iteration >= opt.iteration_limit) return result;
            net_opt.state.learning_rate = poly_lr(iteration, max_iter, cfg.base_lr, cfg.lr_power);
            net_opt.state.max_iterations = max_iter;
            for (auto* d : disc_opt_ptrs) {
                if (d) d->state.learning_rate = cfg.disc_lr;
            }
            const Tensor x_s = gather_images(data.source, plan.source[k]);
            const auto y_s = gather_labels(data.source, plan.source[k]);
            LossReport r;
            try {
                if (opt.source_only) {
                    r = source_only_step(net, net_opt, x_s, y_s, cfg);
                } else {
                    r = uda_step(net, net_opt, *result.discs, disc_opt_ptrs, x_s, y_s,
                                 gather_images(data.target, plan.target[k]),
                                 SynthesisCache::gather(cache->source_to_target, plan.source[k]),
                                 SynthesisCache::gather(cache->target_to_source, plan.target[k]), cfg);
                }
            } catch (const NonFiniteLoss& e) {
                throw NonFiniteLoss("epoch " + std::to_string(epoch) + " iteration " + std::to_string(iteration) +
                                    ": " + e.what());
            } catch (const NonFiniteActivation& e) {
                throw NonFiniteLoss("epoch " + std::to_string(epoch) + " iteration " + std::to_string(iteration) +
                                    ": diverged, " + e.what());
            }
            r.iteration = iteration;
            detail::require_finite(r, epoch);
            auto j = report_json(r);
            j["stage"] = 2;
            j["epoch"] = epoch;
            j["lr"] = net_opt.state.learning_rate;
            if (!opt.source_only) j["lr_disc"] = cfg.disc_lr;
            log.write(j);
            result.reports.push_back(std::move(r));
        }
        log.flush();
        if (!opt.source_only && synthesis->hash() != syn_hash) {
            throw FrozenContractViolation("synthesis parameters changed during stage 2 epoch " + std::to_string(epoch));
        }
        const auto done = epoch + 1;
        if (done % cfg.checkpoint_every == 0 || done == cfg.epochs) {
            save(done, done * n_batches);
            if (opt.validate && !data.validation.empty()) {
                const auto report = evaluate_cases(&net, data.validation, data.validation_eval);
                const double wt = mean_region_dice(report, report.regions.front());
                result.validation.push_back({done, wt});
                val_log.write({{"epoch", done}, {"dsc_" + report.regions.front(), wt}});
                val_log.flush();
                if (wt > best_val) {
                    best_val = wt;
                    result.best_validation_epoch = done;
                }
            }
        }
    }
    return result;
}

inline Stage2Result source_only_baseline(const TrainConfig& cfg, const TrainingData& data, Stage2Options opt = {}) {
    opt.source_only = true;
    return train_stage2(cfg, data, nullptr, opt);
}

/// Loads a stage-2 segmentation network checkpoint.
inline std::unique_ptr<SegNet> load_segnet(const fs::path& path, const TrainConfig& cfg) {
    auto net = std::make_unique<SegNet>(segnet_config(cfg), 0);
    load_checkpoint(read_checkpoint(path), *net, kSegNetKind);
    return net;
}

}  // namespace bigl

#endif  // BIGL_TRAINER_HPP
