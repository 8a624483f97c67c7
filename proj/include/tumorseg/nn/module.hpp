#pragma once

#include <cmath>
#include <deque>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "tumorseg/core/autograd.hpp"
#include "tumorseg/core/rng.hpp"

namespace tumorseg::nn {

template <class T>
struct NamedParameter {
  std::string name;
  Var<T> var;
};

template <class T>
struct NamedBuffer {
  std::string name;
  Tensor<T>* tensor;
};

// Owner of trainable parameters, non-trainable buffers and child modules.
// Parameter names are dotted paths used as checkpoint keys.
template <class T>
class Module {
 public:
  Module() = default;
  Module(const Module&) = delete;
  Module& operator=(const Module&) = delete;
  virtual ~Module() = default;

  std::vector<NamedParameter<T>> named_parameters() const {
    std::vector<NamedParameter<T>> out;
    collect_parameters("", out);
    return out;
  }

  std::vector<Var<T>> parameters() const {
    std::vector<Var<T>> out;
    for (auto& p : named_parameters()) out.push_back(p.var);
    return out;
  }

  std::vector<NamedBuffer<T>> named_buffers() {
    std::vector<NamedBuffer<T>> out;
    collect_buffers("", out);
    return out;
  }

  void set_training(bool on) {
    training_ = on;
    for (auto& [name, child] : children_) child->set_training(on);
  }
  bool training() const { return training_; }

  void zero_grad() {
    for (auto& p : named_parameters()) p.var.zero_grad();
  }

 protected:
  Var<T> add_parameter(std::string name, Tensor<T> init) {
    Var<T> v(std::move(init), true);
    params_.push_back({std::move(name), v});
    return v;
  }

  Tensor<T>& add_buffer(std::string name, Tensor<T> init) {
    buffers_.emplace_back(std::move(name), std::move(init));
    return buffers_.back().second;
  }

  template <class M>
  std::shared_ptr<M> add_module(std::string name, std::shared_ptr<M> m) {
    children_.emplace_back(std::move(name), m);
    return m;
  }

 private:
  void collect_parameters(const std::string& prefix, std::vector<NamedParameter<T>>& out) const {
    for (const auto& p : params_) out.push_back({prefix + p.name, p.var});
    for (const auto& [name, child] : children_) child->collect_parameters(prefix + name + ".", out);
  }
  void collect_buffers(const std::string& prefix, std::vector<NamedBuffer<T>>& out) {
    for (auto& [name, t] : buffers_) out.push_back({prefix + name, &t});
    for (auto& [name, child] : children_) child->collect_buffers(prefix + name + ".", out);
  }

  std::vector<NamedParameter<T>> params_;
  std::deque<std::pair<std::string, Tensor<T>>> buffers_;
  std::vector<std::pair<std::string, std::shared_ptr<Module>>> children_;
  bool training_ = false;
};

template <class T>
std::int64_t count_parameters(const Module<T>& m) {
  std::int64_t n = 0;
  for (const auto& p : m.named_parameters()) n += static_cast<std::int64_t>(p.var.value().numel());
  return n;
}

namespace init {

template <class T>
Tensor<T> normal(Shape shape, double stddev, Rng& rng) {
  Tensor<T> t(std::move(shape));
  for (auto& v : t.vec()) v = static_cast<T>(rng.normal() * stddev);
  return t;
}

template <class T>
Tensor<T> uniform(Shape shape, double bound, Rng& rng) {
  Tensor<T> t(std::move(shape));
  for (auto& v : t.vec()) v = static_cast<T>(rng.uniform(-bound, bound));
  return t;
}

}  // namespace init

}  // namespace tumorseg::nn
