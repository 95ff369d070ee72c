#pragma once

// Reference-counted N-D tensor with a dynamic reverse-mode tape.
//
// A Tensor is a cheap handle; copies alias the same storage. Operations that
// consume at least one tensor requiring gradients record a backward closure on
// the result node. backward() walks the recorded graph in reverse topological
// order and accumulates gradients into every leaf that requires them.

#include <algorithm>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "ctseg/error.hpp"

namespace ctseg::ad {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

namespace detail {

template <typename T>
struct Node {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;
    bool requires_grad = false;
    bool is_leaf = true;
    std::vector<std::shared_ptr<Node>> parents;
    // Reads this node's grad and accumulates into the parents' grads.
    std::function<void()> backward;

    std::vector<T>& ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), T{0});
        return grad;
    }
};

inline thread_local bool grad_mode_enabled = true;

}  // namespace detail

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
public:
    NoGradGuard() : previous_(detail::grad_mode_enabled) { detail::grad_mode_enabled = false; }
    ~NoGradGuard() { detail::grad_mode_enabled = previous_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

inline bool grad_enabled() { return detail::grad_mode_enabled; }

template <typename T>
class Tensor {
public:
    using value_type = T;
    using NodePtr = std::shared_ptr<detail::Node<T>>;

    Tensor() = default;

    Tensor(Shape shape, std::vector<T> data, bool requires_grad = false)
        : node_(std::make_shared<detail::Node<T>>()) {
        for (std::size_t d : shape)
            require(d > 0, ErrorCode::ShapeMismatch, "tensor dims must be positive");
        require(data.size() == ad::numel(shape), ErrorCode::ShapeMismatch,
                "data length " + std::to_string(data.size()) + " does not match shape " +
                    shape_str(shape));
        node_->shape = std::move(shape);
        node_->data = std::move(data);
        node_->requires_grad = requires_grad;
        if (requires_grad) node_->ensure_grad();
    }

    static Tensor zeros(const Shape& shape, bool requires_grad = false) {
        return Tensor(shape, std::vector<T>(ad::numel(shape), T{0}), requires_grad);
    }
    static Tensor full(const Shape& shape, T value, bool requires_grad = false) {
        return Tensor(shape, std::vector<T>(ad::numel(shape), value), requires_grad);
    }
    static Tensor scalar(T value, bool requires_grad = false) {
        return Tensor({1}, {value}, requires_grad);
    }

    [[nodiscard]] bool defined() const { return static_cast<bool>(node_); }
    [[nodiscard]] const Shape& shape() const { return node_->shape; }
    [[nodiscard]] std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
    [[nodiscard]] std::size_t rank() const { return node_->shape.size(); }
    [[nodiscard]] std::size_t numel() const { return node_->data.size(); }

    [[nodiscard]] std::span<T> data() { return node_->data; }
    [[nodiscard]] std::span<const T> data() const { return node_->data; }
    [[nodiscard]] std::vector<T>& values() { return node_->data; }
    [[nodiscard]] const std::vector<T>& values() const { return node_->data; }

    [[nodiscard]] bool requires_grad() const { return node_->requires_grad; }
    [[nodiscard]] bool is_leaf() const { return node_->is_leaf; }
    [[nodiscard]] bool has_grad() const { return node_->grad.size() == node_->data.size(); }
    [[nodiscard]] std::span<T> grad() { return node_->ensure_grad(); }
    [[nodiscard]] std::span<const T> grad() const { return node_->grad; }
    /// Gradient buffer through a const handle; used by backward closures.
    [[nodiscard]] std::span<T> grad_mut() const { return node_->ensure_grad(); }
    void zero_grad() {
        if (node_->requires_grad) std::fill(node_->grad.begin(), node_->grad.end(), T{0});
    }

    [[nodiscard]] T item() const {
        require(numel() == 1, ErrorCode::NotScalar, "item() on tensor of shape " + shape_str(shape()));
        return node_->data[0];
    }

    /// Deep copy without graph history.
    [[nodiscard]] Tensor clone(bool requires_grad = false) const {
        return Tensor(shape(), values(), requires_grad);
    }

    template <typename U>
    [[nodiscard]] Tensor<U> cast(bool requires_grad = false) const {
        std::vector<U> out(values().begin(), values().end());
        return Tensor<U>(shape(), std::move(out), requires_grad);
    }

    [[nodiscard]] const NodePtr& node() const { return node_; }

    /// Builds an op result. The backward closure receives (result node,
    /// parent nodes) and is only retained when gradients are needed.
    template <typename Fn>
    static Tensor make_result(Shape shape, std::vector<T> data,
                              std::initializer_list<Tensor> inputs, Fn&& backward_fn) {
        Tensor out(std::move(shape), std::move(data));
        bool needs = false;
        if (grad_enabled())
            for (const auto& in : inputs) needs = needs || (in.defined() && in.requires_grad());
        if (!needs) return out;
        auto& node = *out.node_;
        node.requires_grad = true;
        node.is_leaf = false;
        for (const auto& in : inputs)
            if (in.defined()) node.parents.push_back(in.node_);
        detail::Node<T>* self = &node;
        node.backward = [self, fn = std::forward<Fn>(backward_fn)]() mutable { fn(*self); };
        return out;
    }

private:
    NodePtr node_;
};

/// Accumulates d(loss)/d(leaf) into every leaf that requires gradients.
/// Intermediate gradients are reset first, so calling backward twice on the
/// same graph doubles the leaf gradients and nothing else.
template <typename T>
void backward(const Tensor<T>& loss) {
    require(loss.defined(), ErrorCode::InvalidArgument, "backward on undefined tensor");
    require(loss.numel() == 1, ErrorCode::NotScalar,
            "backward requires a scalar loss, got " + shape_str(loss.shape()));
    require(loss.requires_grad(), ErrorCode::InvalidArgument,
            "loss was not produced by a tracked computation");

    using NodeT = detail::Node<T>;
    std::vector<NodeT*> order;
    std::unordered_set<NodeT*> visited;
    std::vector<std::pair<NodeT*, std::size_t>> stack{{loss.node().get(), 0}};
    visited.insert(loss.node().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            NodeT* parent = node->parents[next++].get();
            if (parent->requires_grad && visited.insert(parent).second) stack.push_back({parent, 0});
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    for (NodeT* n : order) {
        if (n->is_leaf) continue;
        auto& g = n->ensure_grad();
        std::fill(g.begin(), g.end(), T{0});
    }
    loss.node()->ensure_grad()[0] += T{1};
    for (auto it = order.rbegin(); it != order.rend(); ++it)
        if (!(*it)->is_leaf && (*it)->backward) (*it)->backward();
}

}  // namespace ctseg::ad
