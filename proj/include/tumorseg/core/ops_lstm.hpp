#pragma once

#include <Eigen/Core>

#include "tumorseg/core/ops.hpp"

namespace tumorseg::ops {

// One direction of an LSTM over a channel-major sequence.
// x: (N, C, L); w_ih: (4H, C); w_hh: (4H, H); bias: (4H). Gate order i, f, g, o.
// Returns hidden states (N, H, L). With `reverse` the recurrence runs from
// the last position to the first; outputs stay aligned with input positions.
template <class T>
Var<T> lstm_direction(const Var<T>& x, const Var<T>& w_ih, const Var<T>& w_hh, const Var<T>& bias,
                      bool reverse) {
  const Shape& xs = x.shape();
  if (xs.size() != 3) throw ShapeError("lstm: expected (N, C, L) input, got " + shape_str(xs));
  const std::int64_t n = xs[0], c = xs[1], len = xs[2];
  const std::int64_t h = w_hh.shape().at(1);
  if (w_ih.shape() != Shape{4 * h, c} || w_hh.shape() != Shape{4 * h, h} ||
      bias.value().numel() != static_cast<std::size_t>(4 * h))
    throw ShapeError("lstm: parameter shapes inconsistent with input " + shape_str(xs));
  Shape out_shape{n, h, len};
  if (x.is_meta()) return Var<T>(Tensor<T>::meta(out_shape));

  using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;  // column-major
  using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  Eigen::Map<const RowMat> Wih(w_ih.value().data(), 4 * h, c);
  Eigen::Map<const RowMat> Whh(w_hh.value().data(), 4 * h, h);
  Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> B(bias.value().data(), 4 * h);

  // Per-step caches: activated gates (4H x N), cell (H x N), hidden (H x N), column per sample.
  std::vector<Mat> gates(len), cells(len), hiddens(len);
  Mat hprev = Mat::Zero(h, n), cprev = Mat::Zero(h, n);
  Mat xt(c, n);
  Tensor<T> out(out_shape);
  const T* px = x.value().data();
  for (std::int64_t s = 0; s < len; ++s) {
    const std::int64_t t = reverse ? len - 1 - s : s;
    for (std::int64_t b = 0; b < n; ++b)
      for (std::int64_t i = 0; i < c; ++i) xt(i, b) = px[(b * c + i) * len + t];
    Mat a = Wih * xt + Whh * hprev;
    a.colwise() += B;
    for (std::int64_t b = 0; b < n; ++b) {
      for (std::int64_t j = 0; j < h; ++j) {
        a(j, b) = sigmoid_scalar(a(j, b));
        a(h + j, b) = sigmoid_scalar(a(h + j, b));
        a(2 * h + j, b) = std::tanh(a(2 * h + j, b));
        a(3 * h + j, b) = sigmoid_scalar(a(3 * h + j, b));
      }
    }
    Mat cell = a.middleRows(h, h).cwiseProduct(cprev) + a.topRows(h).cwiseProduct(a.middleRows(2 * h, h));
    Mat hid = a.bottomRows(h).cwiseProduct(cell.array().tanh().matrix());
    for (std::int64_t b = 0; b < n; ++b)
      for (std::int64_t j = 0; j < h; ++j) out[(b * h + j) * len + t] = hid(j, b);
    gates[s] = std::move(a);
    cells[s] = cell;
    hiddens[s] = hid;
    hprev = std::move(hid);
    cprev = std::move(cell);
  }

  return make_result<T>(
      std::move(out), {x, w_ih, w_hh, bias},
      [gates = std::move(gates), cells = std::move(cells), hiddens = std::move(hiddens), n, c, h, len,
       reverse](Node<T>& node) {
        auto& xn = *node.inputs[0];
        auto& wihn = *node.inputs[1];
        auto& whhn = *node.inputs[2];
        auto& bn = *node.inputs[3];
        Eigen::Map<const RowMat> Wih(wihn.value.data(), 4 * h, c);
        Eigen::Map<const RowMat> Whh(whhn.value.data(), 4 * h, h);
        RowMat dWih = RowMat::Zero(4 * h, c), dWhh = RowMat::Zero(4 * h, h);
        Eigen::Matrix<T, Eigen::Dynamic, 1> dB = Eigen::Matrix<T, Eigen::Dynamic, 1>::Zero(4 * h);
        Mat dh_next = Mat::Zero(h, n), dc_next = Mat::Zero(h, n);
        Mat xt(c, n), dh(h, n), da(4 * h, n);
        T* gx = xn.requires_grad ? xn.grad_buffer().data() : nullptr;
        const T* gy = node.grad.data();
        const T* px = xn.value.data();
        for (std::int64_t s = len - 1; s >= 0; --s) {
          const std::int64_t t = reverse ? len - 1 - s : s;
          const Mat& a = gates[s];
          const Mat& cell = cells[s];
          for (std::int64_t b = 0; b < n; ++b)
            for (std::int64_t j = 0; j < h; ++j) dh(j, b) = gy[(b * h + j) * len + t] + dh_next(j, b);
          for (std::int64_t b = 0; b < n; ++b)
            for (std::int64_t j = 0; j < h; ++j) {
              const T ig = a(j, b), fg = a(h + j, b), gg = a(2 * h + j, b), og = a(3 * h + j, b);
              const T tc = std::tanh(cell(j, b));
              const T cp = s > 0 ? cells[s - 1](j, b) : T{0};
              const T dc = dh(j, b) * og * (T{1} - tc * tc) + dc_next(j, b);
              da(j, b) = dc * gg * ig * (T{1} - ig);
              da(h + j, b) = dc * cp * fg * (T{1} - fg);
              da(2 * h + j, b) = dc * ig * (T{1} - gg * gg);
              da(3 * h + j, b) = dh(j, b) * tc * og * (T{1} - og);
              dc_next(j, b) = dc * fg;
            }
          for (std::int64_t b = 0; b < n; ++b)
            for (std::int64_t i = 0; i < c; ++i) xt(i, b) = px[(b * c + i) * len + t];
          dWih.noalias() += da * xt.transpose();
          if (s > 0) dWhh.noalias() += da * hiddens[s - 1].transpose();
          dB += da.rowwise().sum();
          dh_next.noalias() = Whh.transpose() * da;
          if (gx) {
            Mat dx = Wih.transpose() * da;
            for (std::int64_t b = 0; b < n; ++b)
              for (std::int64_t i = 0; i < c; ++i) gx[(b * c + i) * len + t] += dx(i, b);
          }
        }
        if (wihn.requires_grad) {
          Eigen::Map<RowMat>(wihn.grad_buffer().data(), 4 * h, c) += dWih;
        }
        if (whhn.requires_grad) {
          Eigen::Map<RowMat>(whhn.grad_buffer().data(), 4 * h, h) += dWhh;
        }
        if (bn.requires_grad) {
          auto& g = bn.grad_buffer();
          for (std::int64_t i = 0; i < 4 * h; ++i) g[i] += dB(i);
        }
      });
}

}  // namespace tumorseg::ops
