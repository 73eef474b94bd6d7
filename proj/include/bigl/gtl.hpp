#ifndef BIGL_GTL_HPP
#define BIGL_GTL_HPP

// Global-to-local alignment: output-space consistency, adversarial alignment
// of bottleneck features and attention maps, and the weighted total objective.

#include <array>
#include <string>

#include "bigl/segnet.hpp"
#include "bigl/synthesis.hpp"

namespace bigl {

enum class AlignmentLevel { Feature, AttentionPosition, AttentionChannel };

inline const char* to_string(AlignmentLevel l) {
    switch (l) {
        case AlignmentLevel::Feature: return "FEATURE";
        case AlignmentLevel::AttentionPosition: return "ATT_POSITION";
        case AlignmentLevel::AttentionChannel: return "ATT_CHANNEL";
    }
    return "?";
}

/// The four image streams of one iteration.
enum class Stream { Source, Target, SourceToTarget, TargetToSource };

/// y = 1 for representations that originate from labeled images (x_s and its
/// translation x_{s->t}); the adversarial pairs are (x_s vs x_{t->s}) for the
/// source discriminator and (x_{s->t} vs x_t) for the target discriminator.
struct DomainIndicator {
    static double of(Stream s) { return (s == Stream::Source || s == Stream::SourceToTarget) ? 1.0 : 0.0; }
};

struct AlignmentDiscriminatorConfig {
    std::int64_t in_channels = 1;
    std::int64_t width = 16;
    std::int64_t strided_layers = 3;
};

/// Strided convolutions, a 1x1 scoring conv, global average pooling and a
/// sigmoid. With zero strided layers it reduces to sigmoid(w . mean(x) + b).
class AlignmentDiscriminator final : public LayerModule {
public:
    AlignmentDiscriminator(AlignmentLevel level, Domain domain, AlignmentDiscriminatorConfig cfg, std::uint64_t seed)
        : level_(level), domain_(domain) {
        Rng rng(seed);
        std::int64_t in = cfg.in_channels;
        for (std::int64_t i = 0; i < cfg.strided_layers; ++i) {
            const auto out = cfg.width << i;
            layers_.push_back(make_conv("conv" + std::to_string(i), in, out, 3, 2, 1, rng));
            in = out;
        }
        score_ = make_conv("score", in, 1, 1, 1, 0, rng);
    }

    AlignmentLevel level() const { return level_; }
    Domain domain() const { return domain_; }
    Conv& score() { return score_; }

    /// [B, C, H, W] -> [B, 1, 1, 1] probabilities.
    Tensor forward(const Tensor& x) const {
        Tensor h = x;
        for (const auto& l : layers_) h = leaky_relu(l(h));
        Tensor p = sigmoid(global_avg_pool(score_(h)));
        if (!all_finite(p)) throw NonFiniteActivation(std::string(to_string(level_)) + " discriminator output");
        return p;
    }

private:
    AlignmentLevel level_;
    Domain domain_;
    std::vector<Conv> layers_;
    Conv score_;
};

/// Source- and target-side discriminators for one level.
struct DiscriminatorPair {
    AlignmentDiscriminator* source;
    AlignmentDiscriminator* target;
};

/// Per-stream representations at every level.
struct StreamRepresentations {
    std::array<Tensor, 4> features;      // [B, C, h, w]
    std::array<Tensor, 4> position_maps; // [B, N, N]
    std::array<Tensor, 4> channel_maps;  // [B, C, C]

    const Tensor& at(AlignmentLevel level, Stream s) const {
        const auto i = static_cast<std::size_t>(s);
        switch (level) {
            case AlignmentLevel::Feature: return features[i];
            case AlignmentLevel::AttentionPosition: return position_maps[i];
            case AlignmentLevel::AttentionChannel: return channel_maps[i];
        }
        return features[i];
    }
};

/// Attention maps go to the discriminators as one-channel images.
inline Tensor as_discriminator_input(const Tensor& rep) {
    if (rep.rank() == 3) return rep.reshape({rep.dim(0), 1, rep.dim(1), rep.dim(2)});
    return rep;
}

namespace detail {

inline void check_pair(const DiscriminatorPair& discs, AlignmentLevel level) {
    for (const auto* d : {discs.source, discs.target}) {
        if (d->level() != level) {
            throw LevelMismatch(std::string(to_string(d->level())) + " discriminator used at " + to_string(level));
        }
    }
    if (discs.source->domain() != Domain::Source || discs.target->domain() != Domain::Target) {
        throw LevelMismatch("discriminator pair must be (source, target)");
    }
}

/// -E[y log p + (1 - y) log(1 - p)]
inline Tensor indicator_bce(const Tensor& probs, double y) {
    return y == 1.0 ? neg_log_mean(probs) : neg_log_one_minus_mean(probs);
}

}  // namespace detail

// ------------------------------------------------------------------ output

/// Mean over pixels of the squared L2 distance between two per-pixel class
/// probability fields.
inline Tensor output_consistency(const Tensor& p_t, const Tensor& p_t2s) {
    if (p_t.shape() != p_t2s.shape()) {
        throw ShapeMismatch("output consistency: " + to_string(p_t.shape()) + " vs " + to_string(p_t2s.shape()));
    }
    const auto pixels = static_cast<double>(p_t.size()) / static_cast<double>(p_t.dim(1));
    return scale(sum(square(sub(p_t, p_t2s))), 1.0 / pixels);
}

// ------------------------------------------------------------- adversarial

struct AdversarialLosses {
    Tensor source;  // trains D_s: x_s own-domain, x_{t->s} other
    Tensor target;  // trains D_t: x_{s->t} own-domain, x_t other
};

/// Discriminator-side losses at one level. Inputs are detached, so only the
/// discriminators receive gradients.
inline AdversarialLosses adversarial_losses(const StreamRepresentations& reps, AlignmentLevel level,
                                            const DiscriminatorPair& discs) {
    detail::check_pair(discs, level);
    auto score = [&](const AlignmentDiscriminator& d, Stream s) {
        return detail::indicator_bce(d.forward(as_discriminator_input(reps.at(level, s).detach())),
                                     DomainIndicator::of(s));
    };
    return {add(score(*discs.source, Stream::Source), score(*discs.source, Stream::TargetToSource)),
            add(score(*discs.target, Stream::SourceToTarget), score(*discs.target, Stream::Target))};
}

/// Segmentation-network-side loss at one level: the unlabeled-origin streams
/// x_{t->s} and x_t must be scored as labeled-origin by D_s and D_t. The
/// discriminators must be frozen so no gradient lands on them.
inline Tensor consistency_loss(const StreamRepresentations& reps, AlignmentLevel level,
                               const DiscriminatorPair& discs) {
    detail::check_pair(discs, level);
    if (!discs.source->frozen() || !discs.target->frozen()) {
        throw FrozenContractViolation(std::string(to_string(level)) +
                                      " consistency loss needs frozen discriminators");
    }
    const double y_fooled = DomainIndicator::of(Stream::Source);
    return add(detail::indicator_bce(discs.source->forward(as_discriminator_input(reps.at(level, Stream::TargetToSource))),
                                     y_fooled),
               detail::indicator_bce(discs.target->forward(as_discriminator_input(reps.at(level, Stream::Target))),
                                     y_fooled));
}

inline AdversarialLosses attention_adversarial_losses(const StreamRepresentations& reps, AlignmentLevel kind,
                                                      const DiscriminatorPair& discs) {
    if (kind == AlignmentLevel::Feature) throw LevelMismatch("attention loss requested at FEATURE level");
    return adversarial_losses(reps, kind, discs);
}

inline Tensor attention_consistency_loss(const StreamRepresentations& reps, AlignmentLevel kind,
                                         const DiscriminatorPair& discs) {
    if (kind == AlignmentLevel::Feature) throw LevelMismatch("attention loss requested at FEATURE level");
    return consistency_loss(reps, kind, discs);
}

inline AdversarialLosses feature_adversarial_losses(const StreamRepresentations& reps, const DiscriminatorPair& discs) {
    return adversarial_losses(reps, AlignmentLevel::Feature, discs);
}

inline Tensor feature_consistency_loss(const StreamRepresentations& reps, const DiscriminatorPair& discs) {
    return consistency_loss(reps, AlignmentLevel::Feature, discs);
}

// ------------------------------------------------------------------- total

/// Weighted objective over a LossReport. Block terms are averages of their
/// parts (source/target, position/channel), so each block carries unit
/// weight inside lambda_gtl. Stage 2 leaves out the frozen synthesis block.
inline double total_loss(const LossReport& r, const TrainConfig& cfg, Stage stage) {
    using namespace component;
    const double seg = r.at(seg_s) + r.at(seg_syn_s);
    const double out = r.at(output_consis);
    const double adv_feat = 0.5 * (r.at(adv_feat_s) + r.at(adv_feat_t));
    const double adv_att = 0.5 * (r.at(adv_att_s) + r.at(adv_att_t));
    const double consis_att = 0.5 * (r.at(att_consis_pos) + r.at(att_consis_cha));
    const double gtl = adv_feat + r.at(feat_consis) + adv_att + consis_att;
    double total = seg + cfg.lambda_out * out + cfg.lambda_gtl * gtl;
    if (stage == Stage::Synthesis) total += cfg.lambda_syn * (r.at(gen_syn) + r.at(disc_syn));
    return total;
}

/// Same weighting as total_loss over whichever components are present, for
/// partial reports (synthesis-only iterations, ablations, source-only runs).
inline double weighted_total(const LossReport& r, const TrainConfig& cfg) {
    using namespace component;
    auto get = [&](const char* name) { return r.has(name) ? r.at(name) : 0.0; };
    auto block = [&](const char* a, const char* b) {
        const int n = static_cast<int>(r.has(a)) + static_cast<int>(r.has(b));
        return n == 0 ? 0.0 : (get(a) + get(b)) / n;
    };
    const double gtl = block(adv_feat_s, adv_feat_t) + get(feat_consis) + block(adv_att_s, adv_att_t) +
                       block(att_consis_pos, att_consis_cha);
    return get(seg_s) + get(seg_syn_s) + cfg.lambda_out * get(output_consis) + cfg.lambda_gtl * gtl +
           cfg.lambda_syn * (get(gen_syn) + get(disc_syn));
}

}  // namespace bigl

#endif  // BIGL_GTL_HPP
