#ifndef BIGL_OPTIM_HPP
#define BIGL_OPTIM_HPP

#include <cmath>
#include <string>
#include <vector>

#include "bigl/nn.hpp"

namespace bigl {

/// Learning-rate bookkeeping shared by every optimizer.
struct OptimState {
    double learning_rate = 0.0;
    std::int64_t iteration = 0;
    std::int64_t max_iterations = 0;
};

/// base * (1 - iter / max_iter)^power
inline double poly_lr(std::int64_t iter, std::int64_t max_iter, double base, double power) {
    if (max_iter <= 0) throw ScheduleExhausted("max_iter must be positive, got " + std::to_string(max_iter));
    if (iter < 0 || iter > max_iter) {
        throw ScheduleExhausted("iteration " + std::to_string(iter) + " outside [0, " + std::to_string(max_iter) + "]");
    }
    if (iter == max_iter) return 0.0;
    return base * std::pow(1.0 - static_cast<double>(iter) / static_cast<double>(max_iter), power);
}

/// Common interface so the trainer can checkpoint optimizer buffers.
class Optimizer {
public:
    explicit Optimizer(Module& module) : module_(&module) {}
    virtual ~Optimizer() = default;

    /// Applies one update from the accumulated gradients, then clears them.
    virtual void step() = 0;
    virtual std::vector<NamedParameter> buffers() const = 0;
    virtual void load_buffers(const std::vector<NamedParameter>& buffers) = 0;

    OptimState state;

protected:
    Module* module_;

    static std::vector<std::vector<double>> zeros_like(const Module& m) {
        std::vector<std::vector<double>> out;
        for (const auto& p : m.parameters()) out.emplace_back(p.tensor.size(), 0.0);
        return out;
    }

    std::vector<NamedParameter> export_buffers(const std::string& tag,
                                               const std::vector<std::vector<double>>& bufs) const {
        std::vector<NamedParameter> out;
        const auto& params = module_->parameters();
        for (std::size_t i = 0; i < params.size(); ++i) {
            out.push_back({tag + "/" + params[i].name, Tensor::from(params[i].tensor.shape(), bufs[i])});
        }
        return out;
    }

    void import_buffers(const std::string& tag, const std::vector<NamedParameter>& in,
                        std::vector<std::vector<double>>& bufs) const {
        const auto& params = module_->parameters();
        for (std::size_t i = 0; i < params.size(); ++i) {
            const std::string key = tag + "/" + params[i].name;
            for (const auto& b : in) {
                if (b.name == key && b.tensor.size() == bufs[i].size()) bufs[i] = b.tensor.values();
            }
        }
    }
};

/// Stochastic gradient descent with heavy-ball momentum.
class Sgd final : public Optimizer {
public:
    Sgd(Module& module, double lr, double momentum = 0.9)
        : Optimizer(module), momentum_(momentum), velocity_(zeros_like(module)) {
        state.learning_rate = lr;
    }

    void step() override {
        const auto& params = module_->parameters();
        for (std::size_t i = 0; i < params.size(); ++i) {
            Tensor p = params[i].tensor;
            if (!p.has_grad()) continue;
            const auto& g = p.node().grad;
            auto v = p.mutable_data();
            auto& vel = velocity_[i];
            for (std::size_t k = 0; k < g.size(); ++k) {
                vel[k] = momentum_ * vel[k] + g[k];
                v[k] -= state.learning_rate * vel[k];
            }
            p.zero_grad();
        }
        ++state.iteration;
    }

    std::vector<NamedParameter> buffers() const override { return export_buffers("sgd.velocity", velocity_); }
    void load_buffers(const std::vector<NamedParameter>& b) override { import_buffers("sgd.velocity", b, velocity_); }

private:
    double momentum_;
    std::vector<std::vector<double>> velocity_;
};

/// Adaptive-moment optimizer (bias-corrected first and second moments).
class Adam final : public Optimizer {
public:
    Adam(Module& module, double lr, double beta1 = 0.5, double beta2 = 0.999, double eps = 1e-8)
        : Optimizer(module), beta1_(beta1), beta2_(beta2), eps_(eps),
          m_(zeros_like(module)), v_(zeros_like(module)), steps_(module.parameters().size(), 0.0) {
        state.learning_rate = lr;
    }

    void step() override {
        const auto& params = module_->parameters();
        for (std::size_t i = 0; i < params.size(); ++i) {
            Tensor p = params[i].tensor;
            if (!p.has_grad()) continue;
            steps_[i] += 1.0;
            const double c1 = 1.0 - std::pow(beta1_, steps_[i]);
            const double c2 = 1.0 - std::pow(beta2_, steps_[i]);
            const auto& g = p.node().grad;
            auto val = p.mutable_data();
            for (std::size_t k = 0; k < g.size(); ++k) {
                m_[i][k] = beta1_ * m_[i][k] + (1.0 - beta1_) * g[k];
                v_[i][k] = beta2_ * v_[i][k] + (1.0 - beta2_) * g[k] * g[k];
                val[k] -= state.learning_rate * (m_[i][k] / c1) / (std::sqrt(v_[i][k] / c2) + eps_);
            }
            p.zero_grad();
        }
        ++state.iteration;
    }

    std::vector<NamedParameter> buffers() const override {
        auto out = export_buffers("adam.m", m_);
        auto v = export_buffers("adam.v", v_);
        out.insert(out.end(), v.begin(), v.end());
        out.push_back({"adam.steps", Tensor::from({static_cast<std::int64_t>(steps_.size())}, steps_)});
        return out;
    }

    void load_buffers(const std::vector<NamedParameter>& b) override {
        import_buffers("adam.m", b, m_);
        import_buffers("adam.v", b, v_);
        for (const auto& x : b) {
            if (x.name == "adam.steps" && x.tensor.size() == steps_.size()) steps_ = x.tensor.values();
        }
    }

private:
    double beta1_, beta2_, eps_;
    std::vector<std::vector<double>> m_, v_;
    std::vector<double> steps_;
};

}  // namespace bigl

#endif  // BIGL_OPTIM_HPP
