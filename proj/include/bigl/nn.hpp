#ifndef BIGL_NN_HPP
#define BIGL_NN_HPP

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "bigl/ops.hpp"

namespace bigl {

/// Derives an independent stream seed from a root seed and a purpose label
/// ("data", "init", "shuffle", ...), so each component can be reseeded alone.
inline std::uint64_t sub_seed(std::uint64_t root, std::string_view purpose) {
    std::uint64_t h = 1469598103934665603ULL ^ root;
    for (unsigned char ch : purpose) {
        h ^= ch;
        h *= 1099511628211ULL;
    }
    // splitmix64 finalizer
    h += 0x9e3779b97f4a7c15ULL;
    h = (h ^ (h >> 30)) * 0xbf58476d1ce4e5b9ULL;
    h = (h ^ (h >> 27)) * 0x94d049bb133111ebULL;
    return h ^ (h >> 31);
}

using Rng = std::mt19937_64;

struct NamedParameter {
    std::string name;
    Tensor tensor;
};

/// Owns a flat, ordered registry of learnable tensors. Submodules register
/// their parameters under a dotted prefix.
class Module {
public:
    virtual ~Module() = default;

    const std::vector<NamedParameter>& parameters() const { return params_; }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& p : params_) n += p.tensor.size();
        return n;
    }

    /// Frozen parameters take part in forward passes as constants: gradients
    /// flow through them to inputs but never accumulate on them.
    void set_frozen(bool frozen) {
        frozen_ = frozen;
        for (auto& p : params_) p.tensor.set_requires_grad(!frozen);
    }
    bool frozen() const { return frozen_; }

    void zero_grad() {
        for (auto& p : params_) p.tensor.zero_grad();
    }

    /// Order-sensitive FNV-1a over the raw parameter bytes.
    std::uint64_t parameter_hash() const {
        std::uint64_t h = 1469598103934665603ULL;
        for (const auto& p : params_) {
            for (double v : p.tensor.data()) {
                const auto* bytes = reinterpret_cast<const unsigned char*>(&v);
                for (std::size_t i = 0; i < sizeof(double); ++i) {
                    h ^= bytes[i];
                    h *= 1099511628211ULL;
                }
            }
        }
        return h;
    }

    void set_all_parameters(double v) {
        for (auto& p : params_) std::fill(p.tensor.mutable_data().begin(), p.tensor.mutable_data().end(), v);
    }

    Tensor& parameter(std::string_view name) {
        for (auto& p : params_) {
            if (p.name == name) return p.tensor;
        }
        throw ConfigError("no parameter named " + std::string(name));
    }

protected:
    Tensor add_parameter(std::string name, Shape shape, std::vector<double> values) {
        Tensor t = Tensor::parameter(std::move(shape), std::move(values));
        t.set_requires_grad(!frozen_);
        params_.push_back({std::move(name), t});
        return t;
    }

    /// He-scaled normal weights for a layer with `fan_in` inputs.
    Tensor add_scaled_normal(std::string name, Shape shape, std::int64_t fan_in, Rng& rng) {
        std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
        std::vector<double> values(static_cast<std::size_t>(numel(shape)));
        for (auto& v : values) v = dist(rng);
        return add_parameter(std::move(name), std::move(shape), std::move(values));
    }

    Tensor add_constant(std::string name, Shape shape, double v) {
        return add_parameter(std::move(name), shape, std::vector<double>(static_cast<std::size_t>(numel(shape)), v));
    }

private:
    std::vector<NamedParameter> params_;
    bool frozen_ = false;
};

/// Handle to a convolution's parameters inside a Module registry.
struct Conv {
    Tensor weight, bias;
    std::int64_t stride = 1, pad = 0;

    Tensor operator()(const Tensor& x) const { return conv2d(x, weight, bias, stride, pad); }
};

struct Norm {
    Tensor gamma, beta;

    Tensor operator()(const Tensor& x) const { return instance_norm(x, gamma, beta); }
};

/// Layer factory mixin: registers parameters on the owning module.
class LayerModule : public Module {
protected:
    Conv make_conv(const std::string& name, std::int64_t in, std::int64_t out, std::int64_t kernel,
                   std::int64_t stride, std::int64_t pad, Rng& rng) {
        Conv c;
        c.weight = add_scaled_normal(name + ".weight", {out, in, kernel, kernel}, in * kernel * kernel, rng);
        c.bias = add_constant(name + ".bias", {out}, 0.0);
        c.stride = stride;
        c.pad = pad;
        return c;
    }

    Norm make_norm(const std::string& name, std::int64_t channels) {
        return Norm{add_constant(name + ".gamma", {channels}, 1.0), add_constant(name + ".beta", {channels}, 0.0)};
    }
};

}  // namespace bigl

#endif  // BIGL_NN_HPP
