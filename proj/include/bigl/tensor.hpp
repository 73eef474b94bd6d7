#ifndef BIGL_TENSOR_HPP
#define BIGL_TENSOR_HPP

// Dense float64 tensors with reverse-mode automatic differentiation.
//
// A Tensor is a cheap handle onto a shared graph node. Operations in ops.hpp
// build new nodes; calling backward() on a scalar walks the graph in reverse
// topological order and accumulates into every node that requires a gradient.
// Leaves created by Tensor::parameter() keep their gradient across calls until
// zero_grad().

#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "bigl/error.hpp"

namespace bigl {

using Shape = std::vector<std::int64_t>;

inline std::int64_t numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::int64_t{1}, std::multiplies<>{});
}

inline std::string to_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ']';
    return os.str();
}

namespace detail {

struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;  // empty until first accumulation
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward;

    std::vector<double>& grad_buffer() {
        if (grad.empty()) grad.assign(value.size(), 0.0);
        return grad;
    }
};

inline bool& grad_mode() {
    thread_local bool enabled = true;
    return enabled;
}

}  // namespace detail

/// Disables graph construction in its scope (inference, frozen caches).
class NoGradGuard {
public:
    NoGradGuard() : previous_(detail::grad_mode()) { detail::grad_mode() = false; }
    ~NoGradGuard() { detail::grad_mode() = previous_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

class Tensor {
public:
    Tensor() = default;

    static Tensor from(Shape shape, std::vector<double> values) {
        if (static_cast<std::int64_t>(values.size()) != numel(shape)) {
            throw ShapeMismatch("value count " + std::to_string(values.size()) +
                                " does not match shape " + to_string(shape));
        }
        auto node = std::make_shared<detail::Node>();
        node->shape = std::move(shape);
        node->value = std::move(values);
        return Tensor(std::move(node));
    }

    static Tensor full(Shape shape, double v) {
        const auto n = numel(shape);
        return from(std::move(shape), std::vector<double>(static_cast<std::size_t>(n), v));
    }

    static Tensor zeros(Shape shape) { return full(std::move(shape), 0.0); }
    static Tensor scalar(double v) { return from({1}, {v}); }

    /// A trainable leaf. Its gradient persists across backward() calls.
    static Tensor parameter(Shape shape, std::vector<double> values) {
        Tensor t = from(std::move(shape), std::move(values));
        t.node_->requires_grad = true;
        return t;
    }

    bool defined() const { return static_cast<bool>(node_); }
    const Shape& shape() const { return node_->shape; }
    std::int64_t dim(std::size_t i) const { return node_->shape.at(i); }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t size() const { return node_->value.size(); }

    std::span<const double> data() const { return node_->value; }
    /// Raw write access. Only valid on leaves; mutating a value that a live
    /// graph depends on invalidates that graph's gradients.
    std::span<double> mutable_data() { return node_->value; }
    const std::vector<double>& values() const { return node_->value; }

    double item() const {
        if (size() != 1) throw ShapeMismatch("item() on tensor of shape " + to_string(shape()));
        return node_->value[0];
    }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool on) { node_->requires_grad = on; }

    bool has_grad() const { return !node_->grad.empty(); }
    /// Gradient of the last backward pass; zeros if none reached this node.
    std::vector<double> grad() const {
        if (node_->grad.empty()) return std::vector<double>(size(), 0.0);
        return node_->grad;
    }
    void zero_grad() { node_->grad.clear(); }

    /// Same values, cut from the graph.
    Tensor detach() const { return from(shape(), node_->value); }

    Tensor reshape(Shape shape) const;

    /// Reverse pass from a single-element tensor (seed gradient 1).
    void backward() const {
        if (size() != 1) throw ShapeMismatch("backward() requires a scalar, got " + to_string(shape()));
        if (!requires_grad()) return;

        std::vector<detail::Node*> order;
        std::unordered_set<detail::Node*> seen;
        std::vector<std::pair<detail::Node*, std::size_t>> stack{{node_.get(), 0}};
        seen.insert(node_.get());
        while (!stack.empty()) {
            auto& [node, next] = stack.back();
            if (next < node->parents.size()) {
                detail::Node* parent = node->parents[next++].get();
                if (parent->requires_grad && seen.insert(parent).second) stack.emplace_back(parent, 0);
            } else {
                order.push_back(node);
                stack.pop_back();
            }
        }

        node_->grad_buffer()[0] += 1.0;
        for (auto it = order.rbegin(); it != order.rend(); ++it) {
            detail::Node* node = *it;
            if (node->backward && !node->grad.empty()) node->backward(*node);
        }
    }

    detail::Node& node() const { return *node_; }
    const std::shared_ptr<detail::Node>& handle() const { return node_; }

    /// Builds an op result. The backward closure is kept only when some parent
    /// requires a gradient.
    static Tensor make_result(Shape shape, std::vector<double> values, std::vector<Tensor> parents,
                              std::function<void(detail::Node&)> backward) {
        Tensor out = from(std::move(shape), std::move(values));
        bool needs = false;
        if (detail::grad_mode()) {
            for (const auto& p : parents) needs = needs || p.requires_grad();
        }
        if (needs) {
            out.node_->requires_grad = true;
            out.node_->parents.reserve(parents.size());
            for (auto& p : parents) out.node_->parents.push_back(p.node_);
            out.node_->backward = std::move(backward);
        }
        return out;
    }

private:
    explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

    std::shared_ptr<detail::Node> node_;
};

/// Gradient buffer of a parent if it participates in the reverse pass.
inline std::vector<double>* grad_of(detail::Node& child, std::size_t parent_index) {
    auto& parent = *child.parents[parent_index];
    return parent.requires_grad ? &parent.grad_buffer() : nullptr;
}

inline Tensor Tensor::reshape(Shape new_shape) const {
    if (numel(new_shape) != static_cast<std::int64_t>(size())) {
        throw ShapeMismatch("cannot reshape " + to_string(shape()) + " to " + to_string(new_shape));
    }
    return make_result(std::move(new_shape), node_->value, {*this}, [](detail::Node& self) {
        if (auto* g = grad_of(self, 0)) {
            for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[i] += self.grad[i];
        }
    });
}

}  // namespace bigl

#endif  // BIGL_TENSOR_HPP
