#pragma once

#include "tumorseg/core/ops.hpp"

namespace tumorseg::ops {

namespace detail {

// Shared backward for normalisations whose statistics are taken over sets
// of `count` elements: dx = rstd * (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat)).
template <class T>
void normalized_backward(const T* gy, const T* xhat, const T* gamma_per_elem, std::int64_t count,
                         T rstd, T* gx) {
  T sum_d = 0, sum_dx = 0;
  for (std::int64_t i = 0; i < count; ++i) {
    const T dxh = gy[i] * gamma_per_elem[i];
    sum_d += dxh;
    sum_dx += dxh * xhat[i];
  }
  const T inv = T{1} / static_cast<T>(count);
  for (std::int64_t i = 0; i < count; ++i) {
    const T dxh = gy[i] * gamma_per_elem[i];
    gx[i] += rstd * (dxh - sum_d * inv - xhat[i] * sum_dx * inv);
  }
}

}  // namespace detail

// Group normalization over (N, C, ...) with per-channel affine gamma/beta.
template <class T>
Var<T> group_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, std::int64_t groups,
                  T eps = T(1e-5)) {
  const Shape& xs = x.shape();
  if (xs.size() < 2) throw ShapeError("group_norm: rank < 2");
  const std::int64_t n = xs[0], c = xs[1];
  if (groups <= 0 || c % groups != 0)
    throw ShapeError("group_norm: " + std::to_string(groups) + " groups do not divide " +
                     std::to_string(c) + " channels");
  if (gamma.value().numel() != static_cast<std::size_t>(c) ||
      beta.value().numel() != static_cast<std::size_t>(c))
    throw ShapeError("group_norm: affine parameter size mismatch");
  if (x.is_meta()) return Var<T>(Tensor<T>::meta(xs));
  const std::int64_t inner = detail::tail_numel(xs, 2);
  const std::int64_t cpg = c / groups;
  const std::int64_t count = cpg * inner;
  Tensor<T> xhat(xs);
  Tensor<T> out(xs);
  std::vector<T> rstd(static_cast<std::size_t>(n * groups));
  const T* px = x.value().data();
  for (std::int64_t b = 0; b < n; ++b)
    for (std::int64_t gi = 0; gi < groups; ++gi) {
      const std::int64_t off = (b * c + gi * cpg) * inner;
      double mean = 0;
      for (std::int64_t i = 0; i < count; ++i) mean += px[off + i];
      mean /= static_cast<double>(count);
      double var = 0;
      for (std::int64_t i = 0; i < count; ++i) {
        const double dv = px[off + i] - mean;
        var += dv * dv;
      }
      var /= static_cast<double>(count);
      const T r = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(eps)));
      rstd[b * groups + gi] = r;
      for (std::int64_t ch = 0; ch < cpg; ++ch) {
        const std::int64_t cc = gi * cpg + ch;
        const T gm = gamma.value()[cc], bt = beta.value()[cc];
        for (std::int64_t i = 0; i < inner; ++i) {
          const std::int64_t idx = off + ch * inner + i;
          xhat[idx] = static_cast<T>((px[idx] - mean)) * r;
          out[idx] = xhat[idx] * gm + bt;
        }
      }
    }
  return make_result<T>(
      std::move(out), {x, gamma, beta},
      [xhat = std::move(xhat), rstd = std::move(rstd), n, c, groups, cpg, inner, count](Node<T>& node) {
        auto& xn = *node.inputs[0];
        auto& gn = *node.inputs[1];
        auto& bn = *node.inputs[2];
        const T* gy = node.grad.data();
        if (gn.requires_grad || bn.requires_grad) {
          auto& gg = gn.grad_buffer();
          auto& gb = bn.grad_buffer();
          for (std::int64_t b = 0; b < n; ++b)
            for (std::int64_t ch = 0; ch < c; ++ch) {
              const std::int64_t off = (b * c + ch) * inner;
              T sg = 0, sb = 0;
              for (std::int64_t i = 0; i < inner; ++i) {
                sg += gy[off + i] * xhat[off + i];
                sb += gy[off + i];
              }
              gg[ch] += sg;
              gb[ch] += sb;
            }
        }
        if (xn.requires_grad) {
          auto& gx = xn.grad_buffer();
          std::vector<T> gamma_elem(static_cast<std::size_t>(count));
          for (std::int64_t b = 0; b < n; ++b)
            for (std::int64_t gi = 0; gi < groups; ++gi) {
              for (std::int64_t ch = 0; ch < cpg; ++ch)
                std::fill_n(gamma_elem.data() + ch * inner, inner, gn.value[gi * cpg + ch]);
              const std::int64_t off = (b * c + gi * cpg) * inner;
              detail::normalized_backward(gy + off, xhat.data() + off, gamma_elem.data(), count,
                                          rstd[b * groups + gi], gx.data() + off);
            }
        }
      });
}

// Batch normalization over (N, C, ...). In training mode normalises with
// batch statistics and updates the running buffers in place; otherwise uses
// the running buffers.
template <class T>
Var<T> batch_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, Tensor<T>& running_mean,
                  Tensor<T>& running_var, bool training, T momentum = T(0.1), T eps = T(1e-5)) {
  const Shape& xs = x.shape();
  if (xs.size() < 2) throw ShapeError("batch_norm: rank < 2");
  const std::int64_t n = xs[0], c = xs[1];
  if (gamma.value().numel() != static_cast<std::size_t>(c))
    throw ShapeError("batch_norm: affine parameter size mismatch");
  if (x.is_meta()) return Var<T>(Tensor<T>::meta(xs));
  const std::int64_t inner = detail::tail_numel(xs, 2);
  const std::int64_t count = n * inner;
  Tensor<T> xhat(xs), out(xs);
  std::vector<T> rstd(static_cast<std::size_t>(c));
  const T* px = x.value().data();
  for (std::int64_t ch = 0; ch < c; ++ch) {
    double mean, var;
    if (training) {
      mean = 0;
      for (std::int64_t b = 0; b < n; ++b)
        for (std::int64_t i = 0; i < inner; ++i) mean += px[(b * c + ch) * inner + i];
      mean /= static_cast<double>(count);
      var = 0;
      for (std::int64_t b = 0; b < n; ++b)
        for (std::int64_t i = 0; i < inner; ++i) {
          const double dv = px[(b * c + ch) * inner + i] - mean;
          var += dv * dv;
        }
      var /= static_cast<double>(count);
      const double unbiased = count > 1 ? var * count / (count - 1) : var;
      running_mean[ch] = static_cast<T>((1 - momentum) * running_mean[ch] + momentum * mean);
      running_var[ch] = static_cast<T>((1 - momentum) * running_var[ch] + momentum * unbiased);
    } else {
      mean = running_mean[ch];
      var = running_var[ch];
    }
    const T r = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(eps)));
    rstd[ch] = r;
    const T gm = gamma.value()[ch], bt = beta.value()[ch];
    for (std::int64_t b = 0; b < n; ++b)
      for (std::int64_t i = 0; i < inner; ++i) {
        const std::int64_t idx = (b * c + ch) * inner + i;
        xhat[idx] = static_cast<T>(px[idx] - mean) * r;
        out[idx] = xhat[idx] * gm + bt;
      }
  }
  return make_result<T>(
      std::move(out), {x, gamma, beta},
      [xhat = std::move(xhat), rstd = std::move(rstd), n, c, inner, count, training](Node<T>& node) {
        auto& xn = *node.inputs[0];
        auto& gn = *node.inputs[1];
        auto& bn = *node.inputs[2];
        const T* gy = node.grad.data();
        std::vector<T> gy_c(static_cast<std::size_t>(count)), xh_c(static_cast<std::size_t>(count)),
            gx_c(static_cast<std::size_t>(count));
        for (std::int64_t ch = 0; ch < c; ++ch) {
          T sg = 0, sb = 0;
          for (std::int64_t b = 0; b < n; ++b)
            for (std::int64_t i = 0; i < inner; ++i) {
              const std::int64_t idx = (b * c + ch) * inner + i;
              gy_c[b * inner + i] = gy[idx];
              xh_c[b * inner + i] = xhat[idx];
              sg += gy[idx] * xhat[idx];
              sb += gy[idx];
            }
          if (gn.requires_grad) gn.grad_buffer()[ch] += sg;
          if (bn.requires_grad) bn.grad_buffer()[ch] += sb;
          if (!xn.requires_grad) continue;
          const T gm = gn.value[ch];
          auto& gx = xn.grad_buffer();
          if (training) {
            std::vector<T> gamma_elem(static_cast<std::size_t>(count), gm);
            std::fill(gx_c.begin(), gx_c.end(), T{0});
            detail::normalized_backward(gy_c.data(), xh_c.data(), gamma_elem.data(), count, rstd[ch],
                                        gx_c.data());
            for (std::int64_t b = 0; b < n; ++b)
              for (std::int64_t i = 0; i < inner; ++i)
                gx[(b * c + ch) * inner + i] += gx_c[b * inner + i];
          } else {
            for (std::int64_t b = 0; b < n; ++b)
              for (std::int64_t i = 0; i < inner; ++i) {
                const std::int64_t idx = (b * c + ch) * inner + i;
                gx[idx] += gy[idx] * gm * rstd[ch];
              }
          }
        }
      });
}

}  // namespace tumorseg::ops
