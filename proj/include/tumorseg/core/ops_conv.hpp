#pragma once

#include <Eigen/Core>

#include "tumorseg/core/ops.hpp"

namespace tumorseg::ops {

namespace detail {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Fixed-order sum; Eigen's reductions peel by address alignment, which makes
// the rounding depend on where the allocator placed the buffer.
template <class M>
typename M::Scalar row_sum(const M& m, std::int64_t r) {
  typename M::Scalar acc{0};
  for (std::int64_t c = 0; c < m.cols(); ++c) acc += m(r, c);
  return acc;
}

struct ConvGeom {
  std::int64_t ci, x, y, z;     // input channels and extents
  std::int64_t ox, oy, oz;      // output extents
  std::int64_t k, stride, pad;  // cubic kernel
  std::int64_t rows() const { return ci * k * k * k; }
  std::int64_t cols() const { return ox * oy * oz; }
};

inline std::int64_t conv_out_extent(std::int64_t in, std::int64_t k, std::int64_t stride,
                                    std::int64_t pad) {
  const std::int64_t span = in + 2 * pad - k;
  if (span < 0) throw ShapeError("conv: kernel larger than padded input");
  return span / stride + 1;
}

// Per-thread reusable buffer; contents are unspecified on return.
template <class T>
T* scratch(int slot, std::size_t n) {
  thread_local std::vector<T> buffers[2];
  auto& b = buffers[slot];
  if (b.size() < n) b.resize(n);
  return b.data();
}

// Output positions oz in [lo, hi) read input iz = oz * stride - pad + kz inside [0, z).
inline std::pair<std::int64_t, std::int64_t> valid_range(const ConvGeom& g, std::int64_t kz) {
  const std::int64_t off = kz - g.pad;
  std::int64_t lo = off >= 0 ? 0 : (-off + g.stride - 1) / g.stride;
  std::int64_t hi = g.z - off <= 0 ? 0 : (g.z - off - 1) / g.stride + 1;
  hi = std::min(hi, g.oz);
  lo = std::min(lo, hi);
  return {lo, hi};
}

// Unfolds one sample (ci, x, y, z) into a (ci*k^3, ox*oy*oz) column matrix.
template <class T>
void im2col(const T* src, const ConvGeom& g, T* col) {
  std::int64_t row = 0;
  const std::int64_t ncols = g.cols();
  for (std::int64_t c = 0; c < g.ci; ++c)
    for (std::int64_t kx = 0; kx < g.k; ++kx)
      for (std::int64_t ky = 0; ky < g.k; ++ky)
        for (std::int64_t kz = 0; kz < g.k; ++kz, ++row) {
          T* dst = col + row * ncols;
          for (std::int64_t ox = 0; ox < g.ox; ++ox) {
            const std::int64_t ix = ox * g.stride - g.pad + kx;
            for (std::int64_t oy = 0; oy < g.oy; ++oy) {
              const std::int64_t iy = oy * g.stride - g.pad + ky;
              T* d = dst + (ox * g.oy + oy) * g.oz;
              if (ix < 0 || ix >= g.x || iy < 0 || iy >= g.y) {
                std::fill_n(d, g.oz, T{0});
                continue;
              }
              const T* s = src + ((c * g.x + ix) * g.y + iy) * g.z + (kz - g.pad);
              const auto [lo, hi] = valid_range(g, kz);
              std::fill_n(d, lo, T{0});
              if (g.stride == 1) {
                std::copy(s + lo, s + hi, d + lo);
              } else {
                for (std::int64_t oz = lo; oz < hi; ++oz) d[oz] = s[oz * g.stride];
              }
              std::fill(d + hi, d + g.oz, T{0});
            }
          }
        }
}

// Adjoint of im2col: scatters-adds columns back into a sample.
template <class T>
void col2im(const T* col, const ConvGeom& g, T* dst) {
  std::int64_t row = 0;
  const std::int64_t ncols = g.cols();
  for (std::int64_t c = 0; c < g.ci; ++c)
    for (std::int64_t kx = 0; kx < g.k; ++kx)
      for (std::int64_t ky = 0; ky < g.k; ++ky)
        for (std::int64_t kz = 0; kz < g.k; ++kz, ++row) {
          const T* srow = col + row * ncols;
          for (std::int64_t ox = 0; ox < g.ox; ++ox) {
            const std::int64_t ix = ox * g.stride - g.pad + kx;
            if (ix < 0 || ix >= g.x) continue;
            for (std::int64_t oy = 0; oy < g.oy; ++oy) {
              const std::int64_t iy = oy * g.stride - g.pad + ky;
              if (iy < 0 || iy >= g.y) continue;
              const T* s = srow + (ox * g.oy + oy) * g.oz;
              T* d = dst + ((c * g.x + ix) * g.y + iy) * g.z + (kz - g.pad);
              const auto [lo, hi] = valid_range(g, kz);
              for (std::int64_t oz = lo; oz < hi; ++oz) d[oz * g.stride] += s[oz];
            }
          }
        }
}

}  // namespace detail

// 3D convolution with a cubic kernel. x: (N, Ci, X, Y, Z); w: (Co, Ci, k, k, k);
// bias: (Co) or undefined.
template <class T>
Var<T> conv3d(const Var<T>& x, const Var<T>& w, const Var<T>& bias, std::int64_t stride,
              std::int64_t pad) {
  const auto d = dims5(x.shape());
  const Shape& ws = w.shape();
  if (ws.size() != 5 || ws[1] != d.c || ws[2] != ws[3] || ws[3] != ws[4])
    throw ShapeError("conv3d: weight " + shape_str(ws) + " incompatible with input " +
                     shape_str(x.shape()));
  const std::int64_t co = ws[0], k = ws[2];
  const bool has_bias = bias.defined();
  if (has_bias && bias.value().numel() != static_cast<std::size_t>(co))
    throw ShapeError("conv3d: bias size mismatch");
  detail::ConvGeom g{d.c,
                     d.x,
                     d.y,
                     d.z,
                     detail::conv_out_extent(d.x, k, stride, pad),
                     detail::conv_out_extent(d.y, k, stride, pad),
                     detail::conv_out_extent(d.z, k, stride, pad),
                     k,
                     stride,
                     pad};
  Shape out_shape{d.n, co, g.ox, g.oy, g.oz};
  if (x.is_meta()) return Var<T>(Tensor<T>::meta(out_shape));

  using Mat = detail::RowMat<T>;
  const bool direct = (k == 1 && stride == 1 && pad == 0);
  const std::int64_t rows = g.rows(), cols = g.cols();
  Tensor<T> out(out_shape);
  T* col = direct ? nullptr : detail::scratch<T>(0, static_cast<std::size_t>(rows * cols));
  Eigen::Map<const Mat> W(w.value().data(), co, rows);
  for (std::int64_t n = 0; n < d.n; ++n) {
    const T* src = x.value().data() + n * d.c * d.spatial();
    if (!direct) detail::im2col(src, g, col);
    Eigen::Map<const Mat> C(direct ? src : col, rows, cols);
    Eigen::Map<Mat> Y(out.data() + n * co * cols, co, cols);
    Y.noalias() = W * C;
    if (has_bias)
      for (std::int64_t o = 0; o < co; ++o) Y.row(o).array() += bias.value()[o];
  }

  std::vector<Var<T>> inputs{x, w};
  if (has_bias) inputs.push_back(bias);
  return make_result<T>(std::move(out), inputs, [g, d, co, direct, has_bias](Node<T>& node) {
    auto& xn = *node.inputs[0];
    auto& wn = *node.inputs[1];
    const std::int64_t rows = g.rows(), cols = g.cols();
    Eigen::Map<const Mat> W(wn.value.data(), co, rows);
    const auto size = static_cast<std::size_t>(rows * cols);
    T* col = direct || !wn.requires_grad ? nullptr : detail::scratch<T>(0, size);
    T* dcol = direct || !xn.requires_grad ? nullptr : detail::scratch<T>(1, size);
    for (std::int64_t n = 0; n < d.n; ++n) {
      const T* src = xn.value.data() + n * d.c * d.spatial();
      Eigen::Map<const Mat> dY(node.grad.data() + n * co * cols, co, cols);
      if (wn.requires_grad) {
        if (!direct) detail::im2col(src, g, col);
        Eigen::Map<const Mat> C(direct ? src : col, rows, cols);
        Eigen::Map<Mat> dW(wn.grad_buffer().data(), co, rows);
        dW.noalias() += dY * C.transpose();
      }
      if (has_bias && node.inputs[2]->requires_grad) {
        auto& gb = node.inputs[2]->grad_buffer();
        for (std::int64_t o = 0; o < co; ++o) gb[o] += detail::row_sum(dY, o);
      }
      if (xn.requires_grad) {
        T* dst = xn.grad_buffer().data() + n * d.c * d.spatial();
        if (direct) {
          Eigen::Map<Mat> dX(dst, rows, cols);
          dX.noalias() += W.transpose() * dY;
        } else {
          Eigen::Map<Mat> dC(dcol, rows, cols);
          dC.noalias() = W.transpose() * dY;
          detail::col2im(dcol, g, dst);
        }
      }
    }
  });
}

// Per-position linear map over channels: x (N, Ci, ...) -> (N, Co, ...),
// w: (Co, Ci). Equivalent to a kernel-1 convolution of any dimensionality.
template <class T>
Var<T> pointwise(const Var<T>& x, const Var<T>& w, const Var<T>& bias) {
  const Shape& xs = x.shape();
  const Shape& ws = w.shape();
  if (xs.size() < 2 || ws.size() != 2 || ws[1] != xs[1])
    throw ShapeError("pointwise: weight " + shape_str(ws) + " incompatible with input " +
                     shape_str(xs));
  const std::int64_t n = xs[0], ci = xs[1], co = ws[0];
  const std::int64_t inner = detail::tail_numel(xs, 2);
  Shape out_shape = xs;
  out_shape[1] = co;
  if (x.is_meta()) return Var<T>(Tensor<T>::meta(out_shape));
  using Mat = detail::RowMat<T>;
  const bool has_bias = bias.defined();
  Tensor<T> out(out_shape);
  Eigen::Map<const Mat> W(w.value().data(), co, ci);
  for (std::int64_t b = 0; b < n; ++b) {
    Eigen::Map<const Mat> X(x.value().data() + b * ci * inner, ci, inner);
    Eigen::Map<Mat> Y(out.data() + b * co * inner, co, inner);
    Y.noalias() = W * X;
    if (has_bias)
      for (std::int64_t o = 0; o < co; ++o) Y.row(o).array() += bias.value()[o];
  }
  std::vector<Var<T>> inputs{x, w};
  if (has_bias) inputs.push_back(bias);
  return make_result<T>(std::move(out), inputs, [n, ci, co, inner, has_bias](Node<T>& node) {
    auto& xn = *node.inputs[0];
    auto& wn = *node.inputs[1];
    Eigen::Map<const Mat> W(wn.value.data(), co, ci);
    for (std::int64_t b = 0; b < n; ++b) {
      Eigen::Map<const Mat> dY(node.grad.data() + b * co * inner, co, inner);
      Eigen::Map<const Mat> X(xn.value.data() + b * ci * inner, ci, inner);
      if (wn.requires_grad) {
        Eigen::Map<Mat> dW(wn.grad_buffer().data(), co, ci);
        dW.noalias() += dY * X.transpose();
      }
      if (has_bias && node.inputs[2]->requires_grad) {
        auto& gb = node.inputs[2]->grad_buffer();
        for (std::int64_t o = 0; o < co; ++o) gb[o] += detail::row_sum(dY, o);
      }
      if (xn.requires_grad) {
        Eigen::Map<Mat> dX(xn.grad_buffer().data() + b * ci * inner, ci, inner);
        dX.noalias() += W.transpose() * dY;
      }
    }
  });
}

// 1D transposed convolution. x: (N, Ci, L); w: (Ci, Co, k); bias: (Co).
// Output length (L - 1) * stride - 2 * pad + k + output_pad.
template <class T>
Var<T> conv_transpose1d(const Var<T>& x, const Var<T>& w, const Var<T>& bias, std::int64_t stride,
                        std::int64_t pad, std::int64_t output_pad) {
  const Shape& xs = x.shape();
  const Shape& ws = w.shape();
  if (xs.size() != 3 || ws.size() != 3 || ws[0] != xs[1])
    throw ShapeError("conv_transpose1d: weight " + shape_str(ws) + " incompatible with input " +
                     shape_str(xs));
  const std::int64_t n = xs[0], ci = xs[1], len = xs[2], co = ws[1], k = ws[2];
  const std::int64_t out_len = (len - 1) * stride - 2 * pad + k + output_pad;
  if (out_len <= 0) throw ShapeError("conv_transpose1d: empty output");
  Shape out_shape{n, co, out_len};
  if (x.is_meta()) return Var<T>(Tensor<T>::meta(out_shape));
  const bool has_bias = bias.defined();
  Tensor<T> out(out_shape);
  const T* px = x.value().data();
  const T* pw = w.value().data();
  for (std::int64_t b = 0; b < n; ++b)
    for (std::int64_t i = 0; i < ci; ++i)
      for (std::int64_t l = 0; l < len; ++l) {
        const T xv = px[(b * ci + i) * len + l];
        for (std::int64_t o = 0; o < co; ++o)
          for (std::int64_t j = 0; j < k; ++j) {
            const std::int64_t t = l * stride - pad + j;
            if (t >= 0 && t < out_len) out[(b * co + o) * out_len + t] += xv * pw[(i * co + o) * k + j];
          }
      }
  if (has_bias)
    for (std::int64_t b = 0; b < n; ++b)
      for (std::int64_t o = 0; o < co; ++o)
        for (std::int64_t t = 0; t < out_len; ++t) out[(b * co + o) * out_len + t] += bias.value()[o];
  std::vector<Var<T>> inputs{x, w};
  if (has_bias) inputs.push_back(bias);
  return make_result<T>(std::move(out), inputs, [=](Node<T>& node) {
    auto& xn = *node.inputs[0];
    auto& wn = *node.inputs[1];
    const T* gy = node.grad.data();
    T* gx = xn.requires_grad ? xn.grad_buffer().data() : nullptr;
    T* gw = wn.requires_grad ? wn.grad_buffer().data() : nullptr;
    for (std::int64_t b = 0; b < n; ++b)
      for (std::int64_t i = 0; i < ci; ++i)
        for (std::int64_t l = 0; l < len; ++l) {
          const T xv = xn.value[(b * ci + i) * len + l];
          T acc = 0;
          for (std::int64_t o = 0; o < co; ++o)
            for (std::int64_t j = 0; j < k; ++j) {
              const std::int64_t t = l * stride - pad + j;
              if (t < 0 || t >= out_len) continue;
              const T g = gy[(b * co + o) * out_len + t];
              acc += g * wn.value[(i * co + o) * k + j];
              if (gw) gw[(i * co + o) * k + j] += g * xv;
            }
          if (gx) gx[(b * ci + i) * len + l] += acc;
        }
    if (has_bias && node.inputs[2]->requires_grad) {
      auto& gb = node.inputs[2]->grad_buffer();
      for (std::int64_t b = 0; b < n; ++b)
        for (std::int64_t o = 0; o < co; ++o)
          for (std::int64_t t = 0; t < out_len; ++t) gb[o] += gy[(b * co + o) * out_len + t];
    }
  });
}

}  // namespace tumorseg::ops
