#pragma once

#include <cmath>
#include <vector>

#include "tumorseg/core/autograd.hpp"
#include "tumorseg/core/error.hpp"

namespace tumorseg {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;

  void validate() const {
    if (!(beta1 >= 0 && beta1 < 1)) throw ConfigError("optimizer.beta1: must lie in [0, 1)");
    if (!(beta2 >= 0 && beta2 < 1)) throw ConfigError("optimizer.beta2: must lie in [0, 1)");
    if (!(eps > 0)) throw ConfigError("optimizer.eps: must be > 0");
    if (!(weight_decay >= 0)) throw ConfigError("optimizer.weight_decay: must be >= 0");
  }
};

// Adam with bias correction. Moments are kept in double regardless of T.
template <class T>
class Adam {
 public:
  Adam(std::vector<Var<T>> params, AdamConfig cfg = {}) : params_(std::move(params)), cfg_(cfg) {
    cfg_.validate();
    for (const auto& p : params_) {
      m_.emplace_back(p.value().numel(), 0.0);
      v_.emplace_back(p.value().numel(), 0.0);
    }
  }

  // Parameters without a gradient are left untouched but still count the step.
  void step(double lr) {
    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t k = 0; k < params_.size(); ++k) {
      auto& p = params_[k];
      if (!p.has_grad()) continue;
      T* w = p.mutable_value().data();
      const T* g = p.grad().data();
      auto& m = m_[k];
      auto& v = v_[k];
      for (std::size_t i = 0; i < m.size(); ++i) {
        double gi = static_cast<double>(g[i]);
        if (cfg_.weight_decay > 0) gi += cfg_.weight_decay * static_cast<double>(w[i]);
        m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * gi;
        v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * gi * gi;
        const double update = lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg_.eps);
        w[i] = static_cast<T>(static_cast<double>(w[i]) - update);
      }
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  long long steps() const { return t_; }
  const AdamConfig& config() const { return cfg_; }

 private:
  std::vector<Var<T>> params_;
  AdamConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  long long t_ = 0;
};

}  // namespace tumorseg
