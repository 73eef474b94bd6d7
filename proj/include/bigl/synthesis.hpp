#ifndef BIGL_SYNTHESIS_HPP
#define BIGL_SYNTHESIS_HPP

// Bidirectional cross-modality translators and their image discriminators.

#include <memory>
#include <string>

#include "bigl/domain.hpp"
#include "bigl/optim.hpp"
#include "bigl/segnet.hpp"

namespace bigl {

enum class Direction { SourceToTarget, TargetToSource };

inline const char* to_string(Direction d) { return d == Direction::SourceToTarget ? "S_TO_T" : "T_TO_S"; }

struct GeneratorConfig {
    std::int64_t base_width = 32;
    std::int64_t residual_blocks = 4;
};

/// Residual encoder-decoder: stem, two stride-2 downsampling blocks, residual
/// blocks, two upsampling blocks and a tanh head that also sees the input.
class GeneratorNet final : public LayerModule {
public:
    GeneratorNet(Direction direction, GeneratorConfig cfg, std::uint64_t seed) : direction_(direction) {
        Rng rng(seed);
        const auto g = cfg.base_width;
        stem_ = {make_conv("stem", 1, g, 3, 1, 1, rng), make_norm("stem.norm", g)};
        down_[0] = {make_conv("down0", g, 2 * g, 3, 2, 1, rng), make_norm("down0.norm", 2 * g)};
        down_[1] = {make_conv("down1", 2 * g, 4 * g, 3, 2, 1, rng), make_norm("down1.norm", 4 * g)};
        for (std::int64_t r = 0; r < cfg.residual_blocks; ++r) {
            const std::string n = "res" + std::to_string(r);
            res_.push_back({make_conv(n + ".conv1", 4 * g, 4 * g, 3, 1, 1, rng), make_norm(n + ".norm1", 4 * g),
                            make_conv(n + ".conv2", 4 * g, 4 * g, 3, 1, 1, rng), make_norm(n + ".norm2", 4 * g)});
        }
        up_[0] = {make_conv("up0", 4 * g, 2 * g, 3, 1, 1, rng), make_norm("up0.norm", 2 * g)};
        up_[1] = {make_conv("up1", 2 * g, g, 3, 1, 1, rng), make_norm("up1.norm", g)};
        out_ = make_conv("out", g + 1, 1, 3, 1, 1, rng);
    }

    Direction direction() const { return direction_; }

    Domain input_domain() const { return direction_ == Direction::SourceToTarget ? Domain::Source : Domain::Target; }
    Domain output_domain() const {
        return direction_ == Direction::SourceToTarget ? Domain::SynTarget : Domain::SynSource;
    }

    /// [B, 1, H, W] network-space images in, same shape in [-1, 1] out.
    Tensor forward(const Tensor& x) const {
        if (x.rank() != 4 || x.dim(1) != 1 || x.dim(2) % 4 != 0 || x.dim(3) % 4 != 0) {
            throw ShapeMismatch("generator expects [B,1,H,W] with H, W divisible by 4, got " + to_string(x.shape()));
        }
        Tensor h = relu(stem_.norm(stem_.conv(x)));
        for (const auto& d : down_) h = relu(d.norm(d.conv(h)));
        for (const auto& r : res_) h = add(h, r.n2(r.c2(relu(r.n1(r.c1(h))))));
        for (const auto& u : up_) h = relu(u.norm(u.conv(upsample2(h))));
        return tanh(out_(concat_channels(h, x)));
    }

private:
    struct Block {
        Conv conv;
        Norm norm;
    };
    struct Residual {
        Conv c1;
        Norm n1;
        Conv c2;
        Norm n2;
    };

    Direction direction_;
    Block stem_;
    Block down_[2];
    std::vector<Residual> res_;
    Block up_[2];
    Conv out_;
};

struct ImageDiscriminatorConfig {
    std::int64_t base_width = 32;
};

/// Four-layer strided patch classifier; output is a grid of per-patch
/// probabilities.
class ImageDiscriminatorNet final : public LayerModule {
public:
    ImageDiscriminatorNet(Domain domain, ImageDiscriminatorConfig cfg, std::uint64_t seed) : domain_(domain) {
        Rng rng(seed);
        const auto d = cfg.base_width;
        layers_.push_back(make_conv("conv0", 1, d, 4, 2, 1, rng));
        layers_.push_back(make_conv("conv1", d, 2 * d, 4, 2, 1, rng));
        layers_.push_back(make_conv("conv2", 2 * d, 4 * d, 4, 2, 1, rng));
        layers_.push_back(make_conv("conv3", 4 * d, 1, 3, 1, 1, rng));
    }

    Domain domain() const { return domain_; }

    Tensor logits(const Tensor& x) const {
        Tensor h = x;
        for (std::size_t i = 0; i + 1 < layers_.size(); ++i) h = leaky_relu(layers_[i](h));
        return layers_.back()(h);
    }

    Tensor forward(const Tensor& x) const {
        Tensor p = sigmoid(logits(x));
        if (!all_finite(p)) throw NonFiniteActivation("image discriminator output");
        return p;
    }

private:
    Domain domain_;
    std::vector<Conv> layers_;
};

// --------------------------------------------------------------- operations

/// Translates one slice. The result carries the synthetic domain tag and the
/// input's spacing, case id and slice index; pixels are returned in z-score
/// units.
inline Slice2D generate(const GeneratorNet& g, const Slice2D& x) {
    if (x.domain != g.input_domain()) {
        throw DirectionMismatch(std::string(to_string(g.direction())) + " generator cannot take a " +
                                to_string(x.domain) + " slice");
    }
    const Tensor y = g.forward(to_network_tensor(x));
    Grid2D<double> pixels(x.height(), x.width(), 0.0);
    for (std::size_t i = 0; i < pixels.size(); ++i) pixels.values()[i] = y.data()[i] * kNetworkIntensityScale;
    return Slice2D{std::move(pixels), x.spacing, g.output_domain(), x.case_id, x.slice_index};
}

/// -E[log p], probabilities clamped to [1e-7, 1 - 1e-7].
inline Tensor neg_log_mean(const Tensor& probs) {
    if (!all_finite(probs)) throw NonFiniteActivation("discriminator probabilities");
    return scale(mean(log(clamp(probs, kProbClamp, 1.0 - kProbClamp))), -1.0);
}

/// -E[log(1 - p)], probabilities clamped to [1e-7, 1 - 1e-7].
inline Tensor neg_log_one_minus_mean(const Tensor& probs) {
    if (!all_finite(probs)) throw NonFiniteActivation("discriminator probabilities");
    return scale(mean(log(rsub_scalar(1.0, clamp(probs, kProbClamp, 1.0 - kProbClamp)))), -1.0);
}

/// E[log(1 - D(x_syn))] + lambda * E|target - reconstruction|.
/// The literal objective passes (x_t, x_syn) as (target, reconstruction); the
/// cycle variant passes (x_s, G_ts(G_st(x_s))).
inline Tensor generator_loss_from_probs(const Tensor& syn_probs, const Tensor& target, const Tensor& reconstruction,
                                        double lambda_rec) {
    if (target.shape() != reconstruction.shape()) {
        throw ShapeMismatch("reconstruction " + to_string(reconstruction.shape()) + " vs target " +
                            to_string(target.shape()));
    }
    const Tensor adversarial = scale(neg_log_one_minus_mean(syn_probs), -1.0);
    if (lambda_rec == 0.0) return adversarial;
    return add(adversarial, scale(mean(abs(sub(target, reconstruction))), lambda_rec));
}

inline Tensor generator_loss(const Tensor& x_t, const Tensor& x_syn, const ImageDiscriminatorNet& d, double lambda_rec) {
    if (x_t.shape() != x_syn.shape()) {
        throw ShapeMismatch("x_t " + to_string(x_t.shape()) + " vs x_syn " + to_string(x_syn.shape()));
    }
    return generator_loss_from_probs(d.forward(x_syn), x_t, x_syn, lambda_rec);
}

/// -E[log D(real)] - E[log(1 - D(fake))].
inline Tensor discriminator_loss_from_probs(const Tensor& real_probs, const Tensor& syn_probs) {
    return add(neg_log_mean(real_probs), neg_log_one_minus_mean(syn_probs));
}

inline Tensor discriminator_loss(const Tensor& x_real, const Tensor& x_syn, const ImageDiscriminatorNet& d) {
    return discriminator_loss_from_probs(d.forward(x_real), d.forward(x_syn));
}

// ------------------------------------------------------------------ training

/// Both translators and both image discriminators.
struct SynthesisModels {
    GeneratorNet g_st, g_ts;
    ImageDiscriminatorNet d_source, d_target;

    SynthesisModels(const TrainConfig& cfg, std::uint64_t init_seed)
        : g_st(Direction::SourceToTarget, {cfg.gen_base_width, 4}, sub_seed(init_seed, "g_st")),
          g_ts(Direction::TargetToSource, {cfg.gen_base_width, 4}, sub_seed(init_seed, "g_ts")),
          d_source(Domain::Source, {cfg.disc_base_width}, sub_seed(init_seed, "d_source")),
          d_target(Domain::Target, {cfg.disc_base_width}, sub_seed(init_seed, "d_target")) {}

    std::uint64_t hash() const {
        return g_st.parameter_hash() ^ (g_ts.parameter_hash() * 3) ^ (d_source.parameter_hash() * 5) ^
               (d_target.parameter_hash() * 7);
    }

    void set_frozen(bool frozen) {
        g_st.set_frozen(frozen);
        g_ts.set_frozen(frozen);
        d_source.set_frozen(frozen);
        d_target.set_frozen(frozen);
    }
};

struct SynthesisOptimizers {
    Adam g_st, g_ts, d_source, d_target;

    SynthesisOptimizers(SynthesisModels& m, const TrainConfig& cfg)
        : g_st(m.g_st, cfg.syn_lr), g_ts(m.g_ts, cfg.syn_lr), d_source(m.d_source, cfg.syn_disc_lr),
          d_target(m.d_target, cfg.syn_disc_lr) {}

    void set_learning_rates(double gen, double disc) {
        g_st.state.learning_rate = gen;
        g_ts.state.learning_rate = gen;
        d_source.state.learning_rate = disc;
        d_target.state.learning_rate = disc;
    }
};

/// One synthesis iteration: generator update for both directions, then
/// discriminator update on the (pre-update, detached) synthesized images.
inline LossReport synthesis_step(SynthesisModels& m, SynthesisOptimizers& opt, const Tensor& x_s, const Tensor& x_t,
                                 const TrainConfig& cfg) {
    LossReport report;

    m.d_source.set_frozen(true);
    m.d_target.set_frozen(true);
    m.g_st.set_frozen(false);
    m.g_ts.set_frozen(false);
    const Tensor fake_t = m.g_st.forward(x_s);
    const Tensor fake_s = m.g_ts.forward(x_t);
    Tensor gen_st, gen_ts;
    if (cfg.cycle_reconstruction) {
        gen_st = generator_loss_from_probs(m.d_target.forward(fake_t), x_s, m.g_ts.forward(fake_t), cfg.lambda_rec);
        gen_ts = generator_loss_from_probs(m.d_source.forward(fake_s), x_t, m.g_st.forward(fake_s), cfg.lambda_rec);
    } else {
        gen_st = generator_loss(x_t, fake_t, m.d_target, cfg.lambda_rec);
        gen_ts = generator_loss(x_s, fake_s, m.d_source, cfg.lambda_rec);
    }
    const Tensor gen_total = add(gen_st, gen_ts);
    if (!all_finite(gen_total)) throw NonFiniteLoss("generator loss at iteration " + std::to_string(report.iteration));
    gen_total.backward();
    opt.g_st.step();
    opt.g_ts.step();
    m.d_source.set_frozen(false);
    m.d_target.set_frozen(false);

    m.g_st.set_frozen(true);
    m.g_ts.set_frozen(true);
    const Tensor disc_total = add(discriminator_loss(x_t, fake_t.detach(), m.d_target),
                                  discriminator_loss(x_s, fake_s.detach(), m.d_source));
    if (!all_finite(disc_total)) throw NonFiniteLoss("discriminator loss");
    disc_total.backward();
    opt.d_source.step();
    opt.d_target.step();
    m.g_st.set_frozen(false);
    m.g_ts.set_frozen(false);

    report.set(component::gen_syn, gen_total.item());
    report.set(component::disc_syn, disc_total.item());
    report.total = cfg.lambda_syn * (gen_total.item() + disc_total.item());
    return report;
}

/// Runs synthesis_step over every (x_s, x_t) batch of one epoch.
inline std::vector<LossReport> train_synthesis_epoch(SynthesisModels& m, SynthesisOptimizers& opt,
                                                     const std::vector<std::pair<Tensor, Tensor>>& batches,
                                                     const TrainConfig& cfg, std::int64_t first_iteration = 0) {
    if (batches.empty()) throw EmptyEpoch("synthesis epoch has no batches");
    std::vector<LossReport> reports;
    reports.reserve(batches.size());
    for (const auto& [x_s, x_t] : batches) {
        LossReport r = synthesis_step(m, opt, x_s, x_t, cfg);
        r.iteration = first_iteration + static_cast<std::int64_t>(reports.size());
        reports.push_back(std::move(r));
    }
    return reports;
}

}  // namespace bigl

#endif  // BIGL_SYNTHESIS_HPP
