#pragma once

// Segmentation and classification losses: soft Dice, focal and binary
// cross-entropy, their analytic gradients with respect to probabilities, and
// the unweighted sum used for training.

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "tumorseg/core/ops.hpp"

namespace tumorseg {

struct LossConfig {
  double epsilon = 1e-5;      // Dice denominator guard
  double focal_gamma = 2.0;
  double focal_alpha = 0.25;  // weight of positives; negatives get 1 - alpha
  double clamp = 1e-7;        // probabilities are clamped to [clamp, 1 - clamp]

  void validate() const {
    if (!(epsilon > 0)) throw ConfigError("loss.epsilon: must be > 0");
    if (!(focal_gamma >= 0)) throw ConfigError("loss.focal_gamma: must be >= 0");
    if (!(focal_alpha > 0 && focal_alpha <= 1)) throw ConfigError("loss.focal_alpha: must lie in (0, 1]");
    if (!(clamp > 0 && clamp < 0.5)) throw ConfigError("loss.clamp: must lie in (0, 0.5)");
  }
};

namespace losses {

namespace detail {
inline void require_same_size(std::size_t a, std::size_t b, const char* what) {
  if (a != b)
    throw ShapeError(std::string(what) + ": size mismatch " + std::to_string(a) + " vs " + std::to_string(b));
}
}  // namespace detail

// 1 - 2 sum(p g) / (sum(p^2) + sum(g^2) + eps), over one channel.
template <class T>
double dice_loss(std::span<const T> p, std::span<const T> g, double eps = 1e-5) {
  detail::require_same_size(p.size(), g.size(), "dice_loss");
  double inter = 0, pp = 0, gg = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    inter += double(p[i]) * g[i];
    pp += double(p[i]) * p[i];
    gg += double(g[i]) * g[i];
  }
  return 1.0 - 2.0 * inter / (pp + gg + eps);
}

// d(dice_loss)/dp, scaled by `scale` and added into `grad`.
template <class T>
void dice_loss_grad(std::span<const T> p, std::span<const T> g, double eps, double scale, std::span<T> grad) {
  detail::require_same_size(p.size(), g.size(), "dice_loss_grad");
  double inter = 0, pp = 0, gg = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    inter += double(p[i]) * g[i];
    pp += double(p[i]) * p[i];
    gg += double(g[i]) * g[i];
  }
  const double den = pp + gg + eps;
  for (std::size_t i = 0; i < p.size(); ++i)
    grad[i] += static_cast<T>(scale * (-2.0 * g[i] / den + 4.0 * inter * p[i] / (den * den)));
}

inline double clamp_probability(double p, double c) { return std::clamp(p, c, 1.0 - c); }

// Mean of -alpha_t (1 - p_t)^gamma log(p_t).
template <class T>
double focal_loss(std::span<const T> p, std::span<const T> y, double gamma, double alpha, double clamp = 1e-7) {
  detail::require_same_size(p.size(), y.size(), "focal_loss");
  if (p.empty()) return 0.0;
  double acc = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double pc = clamp_probability(p[i], clamp);
    const bool pos = y[i] > T(0.5);
    const double pt = pos ? pc : 1.0 - pc;
    const double at = pos ? alpha : 1.0 - alpha;
    acc += -at * std::pow(1.0 - pt, gamma) * std::log(pt);
  }
  return acc / static_cast<double>(p.size());
}

template <class T>
void focal_loss_grad(std::span<const T> p, std::span<const T> y, double gamma, double alpha, double clamp,
                     double scale, std::span<T> grad) {
  detail::require_same_size(p.size(), y.size(), "focal_loss_grad");
  const double inv = scale / static_cast<double>(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double raw = p[i];
    if (raw < clamp || raw > 1.0 - clamp) continue;  // clamped region is flat
    const bool pos = y[i] > T(0.5);
    const double pt = pos ? raw : 1.0 - raw;
    const double at = pos ? alpha : 1.0 - alpha;
    const double q = 1.0 - pt;
    double d_pt = -at * std::pow(q, gamma) / pt;
    if (gamma != 0.0) d_pt += at * gamma * std::pow(q, gamma - 1.0) * std::log(pt);
    grad[i] += static_cast<T>(inv * (pos ? d_pt : -d_pt));
  }
}

// Mean of -[y log p + (1 - y) log(1 - p)].
template <class T>
double bce_loss(std::span<const T> p, std::span<const T> y, double clamp = 1e-7) {
  detail::require_same_size(p.size(), y.size(), "bce_loss");
  if (p.empty()) return 0.0;
  double acc = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double pc = clamp_probability(p[i], clamp);
    acc += -(y[i] * std::log(pc) + (1.0 - y[i]) * std::log(1.0 - pc));
  }
  return acc / static_cast<double>(p.size());
}

template <class T>
void bce_loss_grad(std::span<const T> p, std::span<const T> y, double clamp, double scale, std::span<T> grad) {
  detail::require_same_size(p.size(), y.size(), "bce_loss_grad");
  const double inv = scale / static_cast<double>(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double raw = p[i];
    if (raw < clamp || raw > 1.0 - clamp) continue;
    grad[i] += static_cast<T>(inv * (-y[i] / raw + (1.0 - y[i]) / (1.0 - raw)));
  }
}

// Gathers channel r of an (N, R, ...) tensor, pooled over the batch.
template <class T>
std::vector<T> gather_channel(const Tensor<T>& t, std::int64_t r) {
  const std::int64_t n = t.dim(0), regions = t.dim(1);
  const std::int64_t inner = static_cast<std::int64_t>(t.numel()) / (n * regions);
  std::vector<T> out(static_cast<std::size_t>(n * inner));
  for (std::int64_t b = 0; b < n; ++b)
    std::copy_n(t.data() + (b * regions + r) * inner, inner, out.data() + b * inner);
  return out;
}

template <class T>
void scatter_add_channel(Tensor<T>& t, std::int64_t r, const std::vector<T>& src) {
  const std::int64_t n = t.dim(0), regions = t.dim(1);
  const std::int64_t inner = static_cast<std::int64_t>(t.numel()) / (n * regions);
  for (std::int64_t b = 0; b < n; ++b)
    for (std::int64_t i = 0; i < inner; ++i) t[(b * regions + r) * inner + i] += src[b * inner + i];
}

// ---- Differentiable wrappers over probability tensors -------------------

// Dice loss per region channel (dim 1), pooled over batch and voxels, then
// averaged over regions.
template <class T>
Var<T> dice_loss(const Var<T>& probs, const Tensor<T>& target, double eps) {
  if (probs.shape() != target.shape()) throw ShapeError("dice_loss: prediction and target shapes differ");
  const std::int64_t regions = probs.shape().at(1);
  double total = 0;
  for (std::int64_t r = 0; r < regions; ++r) {
    auto p = gather_channel(probs.value(), r);
    auto g = gather_channel(target, r);
    total += dice_loss<T>(p, g, eps);
  }
  Tensor<T> out(Shape{}, std::vector<T>{static_cast<T>(total / regions)});
  return make_result<T>(std::move(out), {probs}, [target, eps, regions](Node<T>& node) {
    auto& in = *node.inputs[0];
    auto& grad = in.grad_buffer();
    const double scale = double(node.grad[0]) / regions;
    for (std::int64_t r = 0; r < regions; ++r) {
      auto p = gather_channel(in.value, r);
      auto g = gather_channel(target, r);
      std::vector<T> d(p.size());
      dice_loss_grad<T>(p, g, eps, scale, d);
      scatter_add_channel(grad, r, d);
    }
  });
}

template <class T>
Var<T> focal_loss(const Var<T>& probs, const Tensor<T>& target, const LossConfig& cfg) {
  if (probs.shape() != target.shape()) throw ShapeError("focal_loss: prediction and target shapes differ");
  const double v = focal_loss<T>(probs.value().span(), target.span(), cfg.focal_gamma, cfg.focal_alpha, cfg.clamp);
  return make_result<T>(Tensor<T>(Shape{}, std::vector<T>{static_cast<T>(v)}), {probs},
                        [target, cfg](Node<T>& node) {
                          auto& in = *node.inputs[0];
                          focal_loss_grad<T>(in.value.span(), target.span(), cfg.focal_gamma, cfg.focal_alpha,
                                             cfg.clamp, node.grad[0], in.grad_buffer().span());
                        });
}

template <class T>
Var<T> bce_loss(const Var<T>& probs, const Tensor<T>& target, const LossConfig& cfg) {
  if (probs.shape() != target.shape()) throw ShapeError("bce_loss: prediction and target shapes differ");
  const double v = bce_loss<T>(probs.value().span(), target.span(), cfg.clamp);
  return make_result<T>(Tensor<T>(Shape{}, std::vector<T>{static_cast<T>(v)}), {probs},
                        [target, cfg](Node<T>& node) {
                          auto& in = *node.inputs[0];
                          bce_loss_grad<T>(in.value.span(), target.span(), cfg.clamp, node.grad[0],
                                           in.grad_buffer().span());
                        });
}

}  // namespace losses

// Slice-level targets (N, R, Z) from region masks (N, R, X, Y, Z): 1 iff the
// region has at least one voxel on that axial slice.
template <class T>
Tensor<T> slice_targets(const Tensor<T>& regions) {
  const auto d = dims5(regions.shape());
  Tensor<T> out({d.n, d.c, d.z});
  for (std::int64_t nc = 0; nc < d.n * d.c; ++nc) {
    const T* src = regions.data() + nc * d.spatial();
    T* dst = out.data() + nc * d.z;
    for (std::int64_t p = 0; p < d.x * d.y; ++p)
      for (std::int64_t k = 0; k < d.z; ++k)
        if (src[p * d.z + k] > T(0.5)) dst[k] = T{1};
  }
  return out;
}

template <class T>
struct LossBreakdown {
  Var<T> total;
  double focal_seg = 0, dice = 0, focal_cls = 0, bce = 0;
  double total_value() const { return static_cast<double>(total.value().item()); }
};

// L = L_focal_seg + L_dice + L_focal_cls + L_bce. With several segmentation
// branches (deep supervision) the segmentation terms are averaged over branches.
template <class T>
LossBreakdown<T> total_loss(const std::vector<Var<T>>& seg_branch_logits, const Var<T>& slice_logits,
                            const Tensor<T>& region_gt, const Tensor<T>& slice_gt, const LossConfig& cfg) {
  if (seg_branch_logits.empty()) throw ShapeError("total_loss: no segmentation output");
  LossBreakdown<T> out;
  std::vector<Var<T>> focal_terms, dice_terms;
  for (const auto& logits : seg_branch_logits) {
    auto probs = ops::sigmoid(logits);
    focal_terms.push_back(losses::focal_loss(probs, region_gt, cfg));
    dice_terms.push_back(losses::dice_loss(probs, region_gt, cfg.epsilon));
  }
  Var<T> focal_seg = ops::mean_of(focal_terms);
  Var<T> dice = ops::mean_of(dice_terms);
  auto slice_probs = ops::sigmoid(slice_logits);
  Var<T> focal_cls = losses::focal_loss(slice_probs, slice_gt, cfg);
  Var<T> bce = losses::bce_loss(slice_probs, slice_gt, cfg);
  out.focal_seg = focal_seg.value().item();
  out.dice = dice.value().item();
  out.focal_cls = focal_cls.value().item();
  out.bce = bce.value().item();
  out.total = ops::add(ops::add(focal_seg, dice), ops::add(focal_cls, bce));
  return out;
}

}  // namespace tumorseg
