#pragma once

#include <functional>
#include <memory>
#include <unordered_set>
#include <vector>

#include "tumorseg/core/tensor.hpp"

namespace tumorseg {

namespace detail {
inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode_flag(); }

// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
  ~NoGradGuard() { detail::grad_mode_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <class T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;  // allocated on first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward_fn;

  void accumulate(const Tensor<T>& g) {
    if (grad.empty() || grad.numel() != value.numel()) {
      grad = g;
      grad = grad.reshaped(value.shape());
      return;
    }
    T* dst = grad.data();
    const T* src = g.data();
    for (std::size_t i = 0, n = grad.numel(); i < n; ++i) dst[i] += src[i];
  }

  // Writable gradient buffer of the right size, zero-initialised on first use.
  Tensor<T>& grad_buffer() {
    if (grad.empty() || grad.numel() != value.numel()) grad = Tensor<T>(value.shape());
    return grad;
  }
};

// Handle to a node of the computation graph. Copies share the node.
template <class T>
class Var {
 public:
  Var() = default;
  explicit Var(Tensor<T> value, bool requires_grad = false) : node_(std::make_shared<Node<T>>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Tensor<T>& value() const { return node_->value; }
  Tensor<T>& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  bool is_meta() const { return node_->value.is_meta(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }

  bool has_grad() const { return node_ && !node_->grad.empty(); }
  const Tensor<T>& grad() const { return node_->grad; }
  void zero_grad() { node_->grad = Tensor<T>(); }

  const std::shared_ptr<Node<T>>& node() const { return node_; }

  // Reverse-mode sweep from this node. `seed` defaults to ones (scalar loss).
  void backward(Tensor<T> seed = Tensor<T>()) const {
    if (!requires_grad()) return;
    if (seed.empty()) seed = Tensor<T>(value().shape(), T{1});
    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> seen;
    // Iterative post-order DFS; reversed post-order is a topological order.
    std::vector<std::pair<Node<T>*, std::size_t>> stack{{node_.get(), 0}};
    seen.insert(node_.get());
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->inputs.size()) {
        Node<T>* child = node->inputs[next++].get();
        if (child->requires_grad && seen.insert(child).second) stack.push_back({child, 0});
      } else {
        order.push_back(node);
        stack.pop_back();
      }
    }
    node_->accumulate(seed);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Node<T>* node = *it;
      if (node->backward_fn && !node->grad.empty()) node->backward_fn(*node);
    }
  }

 private:
  std::shared_ptr<Node<T>> node_;
};

// Builds the output node of an op. The backward closure is only recorded
// when grad mode is on and some input requires a gradient.
template <class T>
Var<T> make_result(Tensor<T> value, std::vector<Var<T>> inputs,
                   std::function<void(Node<T>&)> backward_fn) {
  bool needs = false;
  if (grad_enabled() && !value.is_meta())
    for (const auto& in : inputs) needs = needs || in.requires_grad();
  Var<T> out(std::move(value), needs);
  if (needs) {
    auto& node = *out.node();
    node.inputs.reserve(inputs.size());
    for (auto& in : inputs) node.inputs.push_back(in.node());
    node.backward_fn = std::move(backward_fn);
  }
  return out;
}

template <class T>
bool any_meta(std::initializer_list<const Var<T>*> vars) {
  for (auto* v : vars)
    if (v && v->defined() && v->is_meta()) return true;
  return false;
}

}  // namespace tumorseg
