#pragma once

// Differentiable tensor operations over Var<T>. Every op accepts meta
// inputs and then only propagates shapes.

#include <cmath>
#include <limits>
#include <vector>

#include "tumorseg/core/autograd.hpp"
#include "tumorseg/core/rng.hpp"

namespace tumorseg::ops {

namespace detail {

template <class T>
void require_same_shape(const Var<T>& a, const Var<T>& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
}

// Product of extents from `begin` to the end.
inline std::int64_t tail_numel(const Shape& s, std::size_t begin) {
  std::int64_t n = 1;
  for (std::size_t i = begin; i < s.size(); ++i) n *= s[i];
  return n;
}

}  // namespace detail

template <class T>
Var<T> constant(Tensor<T> t) {
  return Var<T>(std::move(t), false);
}

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape(a, b, "add");
  if (any_meta({&a, &b})) return Var<T>(Tensor<T>::meta(a.shape()));
  Tensor<T> out(a.shape());
  const T* pa = a.value().data();
  const T* pb = b.value().data();
  T* po = out.data();
  for (std::size_t i = 0, n = out.numel(); i < n; ++i) po[i] = pa[i] + pb[i];
  return make_result<T>(std::move(out), {a, b}, [](Node<T>& node) {
    for (auto& in : node.inputs)
      if (in->requires_grad) in->accumulate(node.grad);
  });
}

template <class T>
Var<T> scale(const Var<T>& a, T s) {
  if (a.is_meta()) return Var<T>(Tensor<T>::meta(a.shape()));
  Tensor<T> out(a.shape());
  for (std::size_t i = 0, n = out.numel(); i < n; ++i) out[i] = a.value()[i] * s;
  return make_result<T>(std::move(out), {a}, [s](Node<T>& node) {
    auto& in = *node.inputs[0];
    auto& g = in.grad_buffer();
    for (std::size_t i = 0, n = g.numel(); i < n; ++i) g[i] += node.grad[i] * s;
  });
}

// Arithmetic mean of same-shaped vars.
template <class T>
Var<T> mean_of(const std::vector<Var<T>>& xs) {
  if (xs.empty()) throw ShapeError("mean_of: empty input list");
  Var<T> acc = xs.front();
  for (std::size_t i = 1; i < xs.size(); ++i) acc = add(acc, xs[i]);
  return xs.size() == 1 ? acc : scale(acc, T{1} / static_cast<T>(xs.size()));
}

// Scalar <x, w> for a constant weight tensor w.
template <class T>
Var<T> weighted_sum(const Var<T>& x, Tensor<T> w) {
  if (x.shape() != w.shape()) throw ShapeError("weighted_sum: shape mismatch");
  if (x.is_meta()) return Var<T>(Tensor<T>::meta({}));
  T acc = 0;
  for (std::size_t i = 0, n = w.numel(); i < n; ++i) acc += x.value()[i] * w[i];
  return make_result<T>(Tensor<T>(Shape{}, std::vector<T>{acc}), {x}, [w = std::move(w)](Node<T>& node) {
    auto& g = node.inputs[0]->grad_buffer();
    const T s = node.grad[0];
    for (std::size_t i = 0, n = w.numel(); i < n; ++i) g[i] += s * w[i];
  });
}

template <class T>
Var<T> relu(const Var<T>& a) {
  if (a.is_meta()) return Var<T>(Tensor<T>::meta(a.shape()));
  Tensor<T> out(a.shape());
  const T* pa = a.value().data();
  for (std::size_t i = 0, n = out.numel(); i < n; ++i) out[i] = pa[i] > T{0} ? pa[i] : T{0};
  return make_result<T>(std::move(out), {a}, [](Node<T>& node) {
    auto& in = *node.inputs[0];
    auto& g = in.grad_buffer();
    const T* x = in.value.data();
    for (std::size_t i = 0, n = g.numel(); i < n; ++i)
      if (x[i] > T{0}) g[i] += node.grad[i];
  });
}

template <class T>
T sigmoid_scalar(T x) {
  // Branches keep exp() from overflowing for large |x|.
  if (x >= T{0}) return T{1} / (T{1} + std::exp(-x));
  const T e = std::exp(x);
  return e / (T{1} + e);
}

template <class T>
Var<T> sigmoid(const Var<T>& a) {
  if (a.is_meta()) return Var<T>(Tensor<T>::meta(a.shape()));
  Tensor<T> out(a.shape());
  for (std::size_t i = 0, n = out.numel(); i < n; ++i) out[i] = sigmoid_scalar(a.value()[i]);
  return make_result<T>(std::move(out), {a}, [](Node<T>& node) {
    auto& in = *node.inputs[0];
    auto& g = in.grad_buffer();
    for (std::size_t i = 0, n = g.numel(); i < n; ++i) {
      const T s = node.value[i];
      g[i] += node.grad[i] * s * (T{1} - s);
    }
  });
}

// Concatenation along dim 1 of (N, C_i, ...) tensors with equal trailing extents.
template <class T>
Var<T> concat_channels(const std::vector<Var<T>>& xs) {
  if (xs.empty()) throw ShapeError("concat_channels: empty input list");
  Shape out_shape = xs.front().shape();
  if (out_shape.size() < 2) throw ShapeError("concat_channels: rank < 2");
  bool meta = false;
  std::int64_t channels = 0;
  for (const auto& x : xs) {
    Shape s = x.shape();
    if (s.size() != out_shape.size() || s[0] != out_shape[0])
      throw ShapeError("concat_channels: incompatible " + shape_str(s));
    for (std::size_t d = 2; d < s.size(); ++d)
      if (s[d] != out_shape[d]) throw ShapeError("concat_channels: extent mismatch " + shape_str(s));
    channels += s[1];
    meta = meta || x.is_meta();
  }
  out_shape[1] = channels;
  if (meta) return Var<T>(Tensor<T>::meta(out_shape));
  const std::int64_t n = out_shape[0];
  const std::int64_t inner = detail::tail_numel(out_shape, 2);
  Tensor<T> out(out_shape);
  std::int64_t offset = 0;
  for (const auto& x : xs) {
    const std::int64_t c = x.shape()[1];
    for (std::int64_t b = 0; b < n; ++b)
      std::copy_n(x.value().data() + b * c * inner, c * inner,
                  out.data() + (b * channels + offset) * inner);
    offset += c;
  }
  return make_result<T>(std::move(out), xs, [n, inner, channels](Node<T>& node) {
    std::int64_t off = 0;
    for (auto& in : node.inputs) {
      const std::int64_t c = in->value.shape()[1];
      if (in->requires_grad) {
        auto& g = in->grad_buffer();
        for (std::int64_t b = 0; b < n; ++b) {
          const T* src = node.grad.data() + (b * channels + off) * inner;
          T* dst = g.data() + b * c * inner;
          for (std::int64_t i = 0; i < c * inner; ++i) dst[i] += src[i];
        }
      }
      off += c;
    }
  });
}

// Fast normalized fusion: out = sum_k relu(w_k) x_k / (sum_k relu(w_k) + eps).
template <class T>
Var<T> weighted_fusion(const std::vector<Var<T>>& xs, const Var<T>& weights, T eps = T(1e-4)) {
  if (xs.empty()) throw ShapeError("weighted_fusion: no inputs");
  if (weights.value().numel() != xs.size())
    throw ShapeError("weighted_fusion: weight count does not match input count");
  bool meta = false;
  for (const auto& x : xs) {
    detail::require_same_shape(x, xs.front(), "weighted_fusion");
    meta = meta || x.is_meta();
  }
  if (meta) return Var<T>(Tensor<T>::meta(xs.front().shape()));
  const std::size_t k = xs.size();
  std::vector<T> w(k);
  T denom = eps;
  for (std::size_t i = 0; i < k; ++i) {
    w[i] = std::max(weights.value()[i], T{0});
    denom += w[i];
  }
  Tensor<T> out(xs.front().shape());
  for (std::size_t i = 0; i < k; ++i) {
    const T c = w[i] / denom;
    const T* px = xs[i].value().data();
    for (std::size_t j = 0, n = out.numel(); j < n; ++j) out[j] += c * px[j];
  }
  std::vector<Var<T>> inputs = xs;
  inputs.push_back(weights);
  return make_result<T>(std::move(out), inputs, [w, denom, k](Node<T>& node) {
    const std::size_t n = node.grad.numel();
    const T* go = node.grad.data();
    T dot_out = 0;
    for (std::size_t j = 0; j < n; ++j) dot_out += go[j] * node.value[j];
    auto& wnode = *node.inputs[k];
    for (std::size_t i = 0; i < k; ++i) {
      auto& in = *node.inputs[i];
      if (in.requires_grad) {
        auto& g = in.grad_buffer();
        const T c = w[i] / denom;
        for (std::size_t j = 0; j < n; ++j) g[j] += c * go[j];
      }
      if (wnode.requires_grad && wnode.value[i] > T{0}) {
        T dot = 0;
        const T* px = in.value.data();
        for (std::size_t j = 0; j < n; ++j) dot += go[j] * px[j];
        wnode.grad_buffer()[i] += (dot - dot_out) / denom;
      }
    }
  });
}

// 1D linear resampling along `axis` (align_corners = false convention).
template <class T>
Var<T> resize_axis_linear(const Var<T>& x, std::size_t axis, std::int64_t out_len) {
  Shape in_shape = x.shape();
  if (axis >= in_shape.size()) throw ShapeError("resize_axis_linear: bad axis");
  Shape out_shape = in_shape;
  out_shape[axis] = out_len;
  const std::int64_t in_len = in_shape[axis];
  if (in_len == out_len) return x;
  if (x.is_meta()) return Var<T>(Tensor<T>::meta(out_shape));
  std::int64_t outer = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= in_shape[d];
  const std::int64_t inner = detail::tail_numel(in_shape, axis + 1);
  std::vector<std::int64_t> i0(out_len), i1(out_len);
  std::vector<T> lam(out_len);
  const double ratio = static_cast<double>(in_len) / static_cast<double>(out_len);
  for (std::int64_t o = 0; o < out_len; ++o) {
    double src = (o + 0.5) * ratio - 0.5;
    if (src < 0) src = 0;
    const auto lo = std::min<std::int64_t>(static_cast<std::int64_t>(src), in_len - 1);
    i0[o] = lo;
    i1[o] = std::min(lo + 1, in_len - 1);
    lam[o] = static_cast<T>(src - static_cast<double>(lo));
  }
  Tensor<T> out(out_shape);
  const T* px = x.value().data();
  for (std::int64_t a = 0; a < outer; ++a)
    for (std::int64_t o = 0; o < out_len; ++o) {
      const T* r0 = px + (a * in_len + i0[o]) * inner;
      const T* r1 = px + (a * in_len + i1[o]) * inner;
      T* dst = out.data() + (a * out_len + o) * inner;
      const T l = lam[o];
      for (std::int64_t i = 0; i < inner; ++i) dst[i] = (T{1} - l) * r0[i] + l * r1[i];
    }
  return make_result<T>(std::move(out), {x}, [=](Node<T>& node) {
    auto& g = node.inputs[0]->grad_buffer();
    for (std::int64_t a = 0; a < outer; ++a)
      for (std::int64_t o = 0; o < out_len; ++o) {
        const T* src = node.grad.data() + (a * out_len + o) * inner;
        T* r0 = g.data() + (a * in_len + i0[o]) * inner;
        T* r1 = g.data() + (a * in_len + i1[o]) * inner;
        const T l = lam[o];
        for (std::int64_t i = 0; i < inner; ++i) {
          r0[i] += (T{1} - l) * src[i];
          r1[i] += l * src[i];
        }
      }
  });
}

// Trilinear resampling of a 5D tensor to the given spatial extents.
template <class T>
Var<T> resize_trilinear(const Var<T>& x, std::int64_t sx, std::int64_t sy, std::int64_t sz) {
  dims5(x.shape());
  Var<T> r = resize_axis_linear(x, 2, sx);
  r = resize_axis_linear(r, 3, sy);
  return resize_axis_linear(r, 4, sz);
}

template <class T>
Var<T> upsample2x(const Var<T>& x) {
  const auto d = dims5(x.shape());
  return resize_trilinear(x, 2 * d.x, 2 * d.y, 2 * d.z);
}

// 2x2x2 max pooling with stride 2; extents must be even.
template <class T>
Var<T> max_pool2(const Var<T>& x) {
  const auto d = dims5(x.shape());
  if (d.x % 2 || d.y % 2 || d.z % 2) throw ShapeError("max_pool2: odd extent in " + shape_str(x.shape()));
  Shape out_shape{d.n, d.c, d.x / 2, d.y / 2, d.z / 2};
  if (x.is_meta()) return Var<T>(Tensor<T>::meta(out_shape));
  Tensor<T> out(out_shape);
  std::vector<std::int64_t> argmax(out.numel());
  const T* px = x.value().data();
  const std::int64_t ox = d.x / 2, oy = d.y / 2, oz = d.z / 2;
  std::size_t o = 0;
  for (std::int64_t nc = 0; nc < d.n * d.c; ++nc) {
    const std::int64_t base = nc * d.spatial();
    for (std::int64_t i = 0; i < ox; ++i)
      for (std::int64_t j = 0; j < oy; ++j)
        for (std::int64_t k = 0; k < oz; ++k, ++o) {
          std::int64_t best = -1;
          T best_v = -std::numeric_limits<T>::infinity();
          for (int a = 0; a < 2; ++a)
            for (int b = 0; b < 2; ++b)
              for (int c = 0; c < 2; ++c) {
                const std::int64_t idx = base + ((2 * i + a) * d.y + (2 * j + b)) * d.z + (2 * k + c);
                if (px[idx] > best_v || best < 0) {
                  best_v = px[idx];
                  best = idx;
                }
              }
          out[o] = best_v;
          argmax[o] = best;
        }
  }
  return make_result<T>(std::move(out), {x}, [argmax = std::move(argmax)](Node<T>& node) {
    auto& g = node.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < argmax.size(); ++i) g[argmax[i]] += node.grad[i];
  });
}

// Mean over the two non-axial spatial axes: (N, C, X, Y, Z) -> (N, C, Z).
template <class T>
Var<T> mean_over_plane(const Var<T>& x) {
  const auto d = dims5(x.shape());
  Shape out_shape{d.n, d.c, d.z};
  if (x.is_meta()) return Var<T>(Tensor<T>::meta(out_shape));
  Tensor<T> out(out_shape);
  const T inv = T{1} / static_cast<T>(d.x * d.y);
  const T* px = x.value().data();
  for (std::int64_t nc = 0; nc < d.n * d.c; ++nc) {
    T* dst = out.data() + nc * d.z;
    const T* src = px + nc * d.spatial();
    for (std::int64_t p = 0; p < d.x * d.y; ++p)
      for (std::int64_t k = 0; k < d.z; ++k) dst[k] += src[p * d.z + k];
    for (std::int64_t k = 0; k < d.z; ++k) dst[k] *= inv;
  }
  return make_result<T>(std::move(out), {x}, [d, inv](Node<T>& node) {
    auto& g = node.inputs[0]->grad_buffer();
    for (std::int64_t nc = 0; nc < d.n * d.c; ++nc) {
      const T* src = node.grad.data() + nc * d.z;
      T* dst = g.data() + nc * d.spatial();
      for (std::int64_t p = 0; p < d.x * d.y; ++p)
        for (std::int64_t k = 0; k < d.z; ++k) dst[p * d.z + k] += src[k] * inv;
    }
  });
}

// Inverted dropout; identity outside training.
template <class T>
Var<T> dropout(const Var<T>& x, double p, bool training, Rng& rng) {
  if (!training || p <= 0.0 || x.is_meta()) return x;
  const T keep_scale = static_cast<T>(1.0 / (1.0 - p));
  std::vector<T> mask(x.value().numel());
  for (auto& m : mask) m = rng.bernoulli(p) ? T{0} : keep_scale;
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < mask.size(); ++i) out[i] = x.value()[i] * mask[i];
  return make_result<T>(std::move(out), {x}, [mask = std::move(mask)](Node<T>& node) {
    auto& g = node.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < mask.size(); ++i) g[i] += node.grad[i] * mask[i];
  });
}

}  // namespace tumorseg::ops
