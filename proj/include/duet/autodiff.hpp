#pragma once

#include <algorithm>
#include <functional>
#include <memory>
#include <unordered_set>
#include <vector>

#include "duet/kernels.hpp"
#include "duet/tensor.hpp"

namespace duet {

// Reverse-mode tape over tensor-level nodes. A training step builds a fresh
// graph of ops; parameters are long-lived nodes whose grads the optimizer
// consumes. Dropping the loss handle frees the step's activations.

template <typename T>
struct Node;

template <typename T>
using NodePtr = std::shared_ptr<Node<T>>;

template <typename T>
struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    std::vector<NodePtr<T>> parents;
    std::function<void(Node<T>&)> backward_fn;

    void ensure_grad() {
        if (grad.shape != value.shape) grad = Tensor<T>(value.shape);
    }

    void zero_grad() {
        if (grad.shape == value.shape)
            grad.fill(T(0));
        else
            grad = Tensor<T>(value.shape);
    }
};

template <typename T>
class Value {
public:
    Value() = default;
    explicit Value(NodePtr<T> node) : node_(std::move(node)) {}

    static Value constant(Tensor<T> t) {
        auto n = std::make_shared<Node<T>>();
        n->value = std::move(t);
        n->requires_grad = false;
        return Value(std::move(n));
    }

    static Value param(Tensor<T> t) {
        auto n = std::make_shared<Node<T>>();
        n->value = std::move(t);
        n->requires_grad = true;
        n->ensure_grad();
        return Value(std::move(n));
    }

    bool defined() const { return node_ != nullptr; }
    Node<T>* operator->() const { return node_.get(); }
    Node<T>& node() const { return *node_; }
    const NodePtr<T>& ptr() const { return node_; }

    const Tensor<T>& val() const { return node_->value; }
    Tensor<T>& val() { return node_->value; }
    const Tensor<T>& grad() const { return node_->grad; }

    int64_t rows() const { return node_->value.rows(); }
    int64_t cols() const { return node_->value.cols(); }

private:
    NodePtr<T> node_;
};

template <typename T>
Value<T> make_op(Tensor<T> out, std::vector<Value<T>> parents,
                 std::function<void(Node<T>&)> backward) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(out);
    for (auto& p : parents)
        if (p.defined() && p->requires_grad) n->requires_grad = true;
    if (n->requires_grad) {
        for (auto& p : parents) n->parents.push_back(p.ptr());
        n->backward_fn = std::move(backward);
    }
    return Value<T>(std::move(n));
}

// Accumulate g into the node's grad buffer if it participates in training.
template <typename T>
void accumulate_grad(const NodePtr<T>& node, const Tensor<T>& g) {
    if (!node || !node->requires_grad) return;
    node->ensure_grad();
    DUET_CHECK(node->grad.numel() == g.numel(), "autodiff: gradient shape mismatch ",
               shape_str(node->grad.shape), " vs ", shape_str(g.shape));
    T* dst = node->grad.data.data();
    const T* src = g.data.data();
    for (int64_t i = 0; i < g.numel(); ++i) dst[i] += src[i];
}

template <typename T>
void topo_collect(const NodePtr<T>& root, std::vector<Node<T>*>& order) {
    // Iterative DFS; deterministic because graph construction is.
    std::unordered_set<Node<T>*> seen;
    std::vector<std::pair<Node<T>*, size_t>> stack;
    stack.emplace_back(root.get(), 0);
    seen.insert(root.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node<T>* p = node->parents[next++].get();
            if (p && p->requires_grad && !seen.count(p)) {
                seen.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
}

// Run reverse-mode accumulation from a scalar root.
template <typename T>
void backward(const Value<T>& root) {
    DUET_CHECK(root.defined(), "autodiff: backward on empty value");
    DUET_CHECK(root.val().numel() == 1, "autodiff: backward root must be scalar, got shape ",
               shape_str(root.val().shape));
    if (!root->requires_grad) return;
    std::vector<Node<T>*> order;
    topo_collect(root.ptr(), order);
    for (Node<T>* n : order) n->ensure_grad();
    root->grad.data[0] = T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node<T>* n = *it;
        if (n->backward_fn) n->backward_fn(*n);
    }
}

} // namespace duet
