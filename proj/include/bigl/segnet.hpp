#ifndef BIGL_SEGNET_HPP
#define BIGL_SEGNET_HPP

// Dual-attention U-Net shared by all four image streams, plus the supervised
// cross-entropy + generalized-dice objective.

#include <span>
#include <string>
#include <vector>

#include "bigl/domain.hpp"
#include "bigl/nn.hpp"

namespace bigl {

/// Network-space images: z-scored intensities divided by this factor and
/// clipped to [-1, 1], the range of the generators' saturating output.
inline constexpr double kNetworkIntensityScale = 3.0;

inline Tensor to_network_tensor(std::span<const Slice2D> slices) {
    if (slices.empty()) throw ShapeMismatch("no slices to batch");
    const auto h = slices[0].height(), w = slices[0].width();
    std::vector<double> values;
    values.reserve(static_cast<std::size_t>(slices.size() * h * w));
    for (const auto& s : slices) {
        if (s.height() != h || s.width() != w) throw ShapeMismatch("slices in a batch differ in size");
        for (double v : s.pixels.values()) values.push_back(std::clamp(v / kNetworkIntensityScale, -1.0, 1.0));
    }
    return Tensor::from({static_cast<std::int64_t>(slices.size()), 1, h, w}, std::move(values));
}

inline Tensor to_network_tensor(const Slice2D& slice) { return to_network_tensor(std::span<const Slice2D>(&slice, 1)); }

// ------------------------------------------------------------ dual attention

struct AttentionResult {
    Tensor out;  // same shape as the input feature
    Tensor map;  // [B, N, N] for position, [B, C, C] for channel
};

/// Spatial self-attention: out = alpha * (V A^T) + xi with A = softmax(Q^T K).
inline AttentionResult position_attention(const Tensor& xi, const Conv& query, const Conv& key, const Conv& value,
                                          const Tensor& alpha) {
    if (!all_finite(xi)) throw NonFiniteActivation("position attention input");
    const auto b = xi.dim(0), c = xi.dim(1), n = xi.dim(2) * xi.dim(3);
    const Tensor q = query(xi), k = key(xi), v = value(xi);
    const auto cq = q.dim(1);
    const Tensor energy = bmm(transpose_last2(q.reshape({b, cq, n})), k.reshape({b, cq, n}));
    const Tensor map = softmax_rows(energy);
    const Tensor attended = bmm(v.reshape({b, c, n}), transpose_last2(map)).reshape(xi.shape());
    return {add(gate(attended, alpha), xi), map};
}

/// Channel self-attention: out = alpha * (A X) + xi with A = softmax(X X^T).
inline AttentionResult channel_attention(const Tensor& xi, const Tensor& alpha) {
    if (!all_finite(xi)) throw NonFiniteActivation("channel attention input");
    const auto b = xi.dim(0), c = xi.dim(1), n = xi.dim(2) * xi.dim(3);
    const Tensor flat = xi.reshape({b, c, n});
    const Tensor map = softmax_rows(bmm(flat, transpose_last2(flat)));
    const Tensor attended = bmm(map, flat).reshape(xi.shape());
    return {add(gate(attended, alpha), xi), map};
}

/// Position and channel maps at the bottleneck plus the learnable gates.
struct AttentionBundle {
    Tensor position_map;
    Tensor channel_map;
    Tensor alpha_pos;
    Tensor alpha_cha;
};

struct SegOutput {
    Tensor logits;    // [B, c, H, W]
    AttentionBundle attention;
    Tensor features;  // [B, C, H/16, W/16], after the attention block
};

struct SegNetConfig {
    std::int64_t base_width = 32;
    std::int64_t num_classes = 4;
    std::int64_t image_height = 64;
    std::int64_t image_width = 64;
};

/// Four-stage U-Net with a dual-attention bottleneck. The attention gates
/// start at zero, so an untrained network behaves as the plain U-Net.
class SegNet final : public LayerModule {
public:
    SegNet(SegNetConfig cfg, std::uint64_t seed) : cfg_(cfg) {
        Rng rng(seed);
        const auto w = cfg.base_width;
        std::int64_t in = 1;
        for (int s = 0; s < 4; ++s) {
            const auto out = w << s;
            enc_.push_back(make_double(("enc" + std::to_string(s)), in, out, rng));
            in = out;
        }
        const auto cb = w << 4;
        bottleneck_ = make_double("bottleneck", in, cb, rng);
        const auto cq = std::max<std::int64_t>(cb / 8, 1);
        query_ = make_conv("attention.query", cb, cq, 1, 1, 0, rng);
        key_ = make_conv("attention.key", cb, cq, 1, 1, 0, rng);
        value_ = make_conv("attention.value", cb, cb, 1, 1, 0, rng);
        alpha_pos_ = add_constant("attention.alpha_pos", {1}, 0.0);
        alpha_cha_ = add_constant("attention.alpha_cha", {1}, 0.0);
        in = cb;
        for (int s = 3; s >= 0; --s) {
            const auto out = w << s;
            Up up;
            up.reduce = make_conv("dec" + std::to_string(s) + ".up", in, out, 3, 1, 1, rng);
            up.norm = make_norm("dec" + std::to_string(s) + ".up_norm", out);
            up.block = make_double("dec" + std::to_string(s), 2 * out, out, rng);
            dec_.push_back(up);
            in = out;
        }
        head_ = make_conv("head", w, cfg.num_classes, 1, 1, 0, rng);
    }

    const SegNetConfig& config() const { return cfg_; }
    std::int64_t bottleneck_channels() const { return cfg_.base_width << 4; }

    Tensor& alpha_pos() { return alpha_pos_; }
    Tensor& alpha_cha() { return alpha_cha_; }
    Conv& head() { return head_; }

    /// x: [B, 1, H, W] network-space images. With `bypass_attention` the
    /// bottleneck output goes straight to the decoder (plain U-Net path).
    SegOutput forward(const Tensor& x, bool bypass_attention = false) const {
        if (x.rank() != 4 || x.dim(1) != 1 || x.dim(2) != cfg_.image_height || x.dim(3) != cfg_.image_width) {
            throw ShapeMismatch("segnet expects [B,1," + std::to_string(cfg_.image_height) + "," +
                                std::to_string(cfg_.image_width) + "], got " + to_string(x.shape()));
        }
        if (!all_finite(x)) throw NonFiniteActivation("segnet input");
        std::vector<Tensor> skips;
        Tensor h = x;
        for (const auto& block : enc_) {
            h = block(h);
            skips.push_back(h);
            h = max_pool2(h);
        }
        const Tensor xi = bottleneck_(h);

        SegOutput out;
        Tensor fused;
        if (bypass_attention) {
            fused = xi;
        } else {
            auto pos = position_attention(xi, query_, key_, value_, alpha_pos_);
            auto cha = channel_attention(xi, alpha_cha_);
            // Sum of both attended features, sharing one residual copy of xi.
            fused = add(pos.out, sub(cha.out, xi));
            out.attention = {pos.map, cha.map, alpha_pos_, alpha_cha_};
        }
        out.features = fused;

        h = fused;
        for (std::size_t i = 0; i < dec_.size(); ++i) {
            const auto& up = dec_[i];
            h = relu(up.norm(up.reduce(upsample2(h))));
            h = up.block(concat_channels(h, skips[skips.size() - 1 - i]));
        }
        out.logits = head_(h);
        return out;
    }

    SegOutput forward(const Slice2D& slice) const { return forward(to_network_tensor(slice)); }

private:
    struct DoubleConv {
        Conv c1, c2;
        Norm n1, n2;
        Tensor operator()(const Tensor& x) const { return relu(n2(c2(relu(n1(c1(x)))))); }
    };
    struct Up {
        Conv reduce;
        Norm norm;
        DoubleConv block;
    };

    DoubleConv make_double(const std::string& name, std::int64_t in, std::int64_t out, Rng& rng) {
        DoubleConv d;
        d.c1 = make_conv(name + ".conv1", in, out, 3, 1, 1, rng);
        d.n1 = make_norm(name + ".norm1", out);
        d.c2 = make_conv(name + ".conv2", out, out, 3, 1, 1, rng);
        d.n2 = make_norm(name + ".norm2", out);
        return d;
    }

    SegNetConfig cfg_;
    std::vector<DoubleConv> enc_;
    DoubleConv bottleneck_;
    Conv query_, key_, value_;
    Tensor alpha_pos_, alpha_cha_;
    std::vector<Up> dec_;
    Conv head_;
};

// -------------------------------------------------------------------- losses

inline constexpr double kProbClamp = 1e-7;

/// Flattens masks into one class vector in [B, H, W] order.
inline std::vector<std::int32_t> stack_labels(std::span<const LabelMask> masks) {
    std::vector<std::int32_t> out;
    for (const auto& m : masks) out.insert(out.end(), m.classes.values().begin(), m.classes.values().end());
    return out;
}

/// Cross-entropy plus generalized dice over the classes present in each
/// slice, with inverse-frequency weights normalized to sum to one.
inline Tensor segmentation_loss(const Tensor& logits, std::span<const std::int32_t> labels) {
    if (logits.rank() != 4) throw ShapeMismatch("logits must be [B,c,H,W], got " + to_string(logits.shape()));
    const auto b = logits.dim(0), c = logits.dim(1), hw = logits.dim(2) * logits.dim(3);
    if (static_cast<std::int64_t>(labels.size()) != b * hw) {
        throw ShapeMismatch("label count " + std::to_string(labels.size()) + " does not match logits " +
                            to_string(logits.shape()));
    }
    std::vector<double> onehot(static_cast<std::size_t>(b * c * hw), 0.0);
    std::vector<double> counts(static_cast<std::size_t>(b * c), 0.0);
    for (std::int64_t i = 0; i < b; ++i) {
        for (std::int64_t p = 0; p < hw; ++p) {
            const auto y = labels[static_cast<std::size_t>(i * hw + p)];
            if (y < 0 || y >= c) throw LabelSchemeViolation("label " + std::to_string(y) + " outside [0, c)");
            onehot[static_cast<std::size_t>((i * c + y) * hw + p)] = 1.0;
            counts[static_cast<std::size_t>(i * c + y)] += 1.0;
        }
    }
    std::vector<double> weights(counts.size(), 0.0), absent(counts.size(), 0.0);
    for (std::int64_t i = 0; i < b; ++i) {
        double z = 0.0;
        for (std::int64_t k = 0; k < c; ++k) {
            const auto idx = static_cast<std::size_t>(i * c + k);
            if (counts[idx] > 0.0) {
                weights[idx] = 1.0 / counts[idx];
                z += weights[idx];
            } else {
                absent[idx] = 1.0;
            }
        }
        for (std::int64_t k = 0; k < c; ++k) weights[static_cast<std::size_t>(i * c + k)] /= z;
    }

    const Tensor y = Tensor::from(logits.shape(), std::move(onehot));
    const Tensor probs = softmax_channels(logits);
    const Tensor ce = scale(sum(mul(y, log(clamp(probs, kProbClamp, 1.0 - kProbClamp)))),
                            -1.0 / static_cast<double>(b * hw));

    std::vector<double> denom_offset(counts.size());
    for (std::size_t i = 0; i < counts.size(); ++i) denom_offset[i] = counts[i] + absent[i];
    const Tensor inter = spatial_sum(mul(probs, y));
    const Tensor denom = add(spatial_sum(probs), Tensor::from({b, c}, std::move(denom_offset)));
    const Tensor dice = div(scale(inter, 2.0), denom);
    const Tensor weighted = sum(mul(Tensor::from({b, c}, std::move(weights)), dice));
    const Tensor gdl = rsub_scalar(1.0, scale(weighted, 1.0 / static_cast<double>(b)));
    return add(ce, gdl);
}

inline Tensor segmentation_loss(const Tensor& logits, std::span<const LabelMask> masks) {
    const auto labels = stack_labels(masks);
    return segmentation_loss(logits, std::span<const std::int32_t>(labels));
}

struct SegLossPair {
    Tensor source;     // on x_s
    Tensor synthetic;  // on x_{s->t}
};

/// Both supervised terms against the same source ground truth, through one
/// shared network.
inline SegLossPair seg_losses_pair(const SegNet& net, const Tensor& x_s, const Tensor& x_syn_t,
                                   std::span<const LabelMask> y_s) {
    const auto labels = stack_labels(y_s);
    const std::span<const std::int32_t> view(labels);
    return {segmentation_loss(net.forward(x_s).logits, view), segmentation_loss(net.forward(x_syn_t).logits, view)};
}

/// Arg-max class per pixel for one sample of a logits batch.
inline LabelMask predict_mask(const Tensor& logits, std::int64_t sample, std::vector<std::string> names = {}) {
    const auto c = logits.dim(1), h = logits.dim(2), w = logits.dim(3);
    Grid2D<std::int32_t> out(h, w, 0);
    const double* base = logits.data().data() + sample * c * h * w;
    for (std::int64_t p = 0; p < h * w; ++p) {
        std::int32_t best = 0;
        for (std::int64_t k = 1; k < c; ++k) {
            if (base[k * h * w + p] > base[best * h * w + p]) best = static_cast<std::int32_t>(k);
        }
        out.values()[static_cast<std::size_t>(p)] = best;
    }
    return LabelMask{std::move(out), static_cast<std::int32_t>(c), std::move(names)};
}

}  // namespace bigl

#endif  // BIGL_SEGNET_HPP
