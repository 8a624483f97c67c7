#pragma once

// Hand-built predictors with known behaviour under flips, shared by the
// inference tests and the acceptance run.

#include <array>
#include <cmath>

#include "tumorseg/core/ops.hpp"
#include "tumorseg/core/ops_conv.hpp"
#include "tumorseg/core/rng.hpp"
#include "tumorseg/inference.hpp"

namespace tumorseg::testing {

inline Tensor<float> random_image(Shape s, Rng& rng) {
  Tensor<float> t(std::move(s));
  for (auto& v : t.vec()) v = static_cast<float>(rng.normal());
  return t;
}

inline Predictor<float> constant_model(float seg, float slice) {
  return [=](const Tensor<float>& x) {
    const auto d = dims5(x.shape());
    return ModelOutput<float>{Tensor<float>({1, 3, d.x, d.y, d.z}, seg), Tensor<float>({1, 3, d.z}, slice)};
  };
}

// Convolution with a kernel symmetric under every axis reversal, followed by
// in-plane pooling for the slice logits: equivariant to all 8 flips.
inline Predictor<float> equivariant_model(Rng& rng) {
  Tensor<float> w({3, 4, 3, 3, 3});
  std::array<std::array<float, 4>, 12> table;
  for (auto& row : table)
    for (auto& v : row) v = static_cast<float>(rng.uniform(-0.5, 0.5));
  for (int o = 0; o < 3; ++o)
    for (int i = 0; i < 4; ++i)
      for (int a = 0; a < 3; ++a)
        for (int b = 0; b < 3; ++b)
          for (int c = 0; c < 3; ++c) {
            const int key = std::abs(a - 1) + 2 * std::abs(b - 1) + 4 * std::abs(c - 1);
            w[(((o * 4 + i) * 3 + a) * 3 + b) * 3 + c] = table[key + o][i];
          }
  Tensor<float> bias({3});
  for (auto& v : bias.vec()) v = static_cast<float>(rng.uniform(-0.2, 0.2));
  return [w, bias](const Tensor<float>& x) {
    NoGradGuard g;
    auto seg = ops::conv3d(Var<float>(x), Var<float>(w), Var<float>(bias), 1, 1);
    auto sl = ops::mean_over_plane(seg);
    return ModelOutput<float>{seg.value(), sl.value()};
  };
}

inline double max_abs_diff(const Tensor<float>& a, const Tensor<float>& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::fabs(double(a[i]) - double(b[i])));
  return m;
}

}  // namespace tumorseg::testing
