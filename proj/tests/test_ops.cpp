#include <gtest/gtest.h>

#include "gradcheck.hpp"
#include "tumorseg/core/ops_conv.hpp"
#include "tumorseg/core/ops_lstm.hpp"
#include "tumorseg/core/ops_norm.hpp"

namespace tumorseg {
namespace {

using testing::grad_check;
using testing::random_projection;
using V = Var<double>;

V random_leaf(Shape s, std::uint64_t seed, double scale = 1.0) {
  Rng rng(seed);
  Tensor<double> t(std::move(s));
  for (auto& v : t.vec()) v = rng.normal() * scale;
  return V(std::move(t), true);
}

constexpr double kTol = 1e-6;

TEST(Ops, Conv3dStride1MatchesFiniteDifferences) {
  auto x = random_leaf({2, 3, 4, 5, 3}, 1);
  auto w = random_leaf({4, 3, 3, 3, 3}, 2, 0.3);
  auto b = random_leaf({4}, 3);
  auto r = grad_check([&] { return random_projection(ops::conv3d(x, w, b, 1, 1)); },
                      {{"x", x}, {"w", w}, {"b", b}});
  EXPECT_LT(r.max_rel_error, kTol) << r.worst;
}

TEST(Ops, Conv3dStride2MatchesFiniteDifferences) {
  auto x = random_leaf({1, 2, 6, 4, 5}, 4);
  auto w = random_leaf({3, 2, 3, 3, 3}, 5, 0.3);
  auto b = random_leaf({3}, 6);
  auto y = ops::conv3d(x, w, b, 2, 1);
  EXPECT_EQ(y.shape(), (Shape{1, 3, 3, 2, 3}));
  auto r = grad_check([&] { return random_projection(ops::conv3d(x, w, b, 2, 1)); },
                      {{"x", x}, {"w", w}, {"b", b}});
  EXPECT_LT(r.max_rel_error, kTol) << r.worst;
}

TEST(Ops, Conv3dAgreesWithDirectSummation) {
  auto x = random_leaf({1, 2, 3, 3, 3}, 7);
  auto w = random_leaf({1, 2, 3, 3, 3}, 8);
  V none;
  auto y = ops::conv3d(x, w, none, 1, 1);
  // Centre output voxel sees the whole 3x3x3 input.
  double expect = 0;
  for (int c = 0; c < 2; ++c)
    for (int i = 0; i < 27; ++i) expect += x.value()[c * 27 + i] * w.value()[c * 27 + i];
  EXPECT_NEAR(y.value()[13], expect, 1e-12);
}

TEST(Ops, PointwiseMatchesFiniteDifferences) {
  auto x = random_leaf({2, 3, 5}, 9);
  auto w = random_leaf({4, 3}, 10);
  auto b = random_leaf({4}, 11);
  auto r = grad_check([&] { return random_projection(ops::pointwise(x, w, b)); },
                      {{"x", x}, {"w", w}, {"b", b}});
  EXPECT_LT(r.max_rel_error, kTol) << r.worst;
}

TEST(Ops, TransposeConvDoublesLengthAndMatchesFiniteDifferences) {
  auto x = random_leaf({2, 3, 5}, 12);
  auto w = random_leaf({3, 2, 3}, 13);
  auto b = random_leaf({2}, 14);
  EXPECT_EQ(ops::conv_transpose1d(x, w, b, 2, 1, 1).shape(), (Shape{2, 2, 10}));
  auto r = grad_check([&] { return random_projection(ops::conv_transpose1d(x, w, b, 2, 1, 1)); },
                      {{"x", x}, {"w", w}, {"b", b}});
  EXPECT_LT(r.max_rel_error, kTol) << r.worst;
}

TEST(Ops, GroupNormMatchesFiniteDifferences) {
  auto x = random_leaf({2, 4, 3, 2, 2}, 15);
  auto g = random_leaf({4}, 16);
  auto b = random_leaf({4}, 17);
  auto r = grad_check([&] { return random_projection(ops::group_norm(x, g, b, 2)); },
                      {{"x", x}, {"gamma", g}, {"beta", b}});
  EXPECT_LT(r.max_rel_error, kTol) << r.worst;
}

TEST(Ops, GroupNormNormalisesEachGroup) {
  auto x = random_leaf({1, 4, 3, 3, 3}, 18, 5.0);
  V g(Tensor<double>({4}, 1.0)), b(Tensor<double>({4}, 0.0));
  auto y = ops::group_norm(x, g, b, 2);
  for (int grp = 0; grp < 2; ++grp) {
    double m = 0, v = 0;
    for (int i = 0; i < 54; ++i) m += y.value()[grp * 54 + i];
    m /= 54;
    for (int i = 0; i < 54; ++i) v += std::pow(y.value()[grp * 54 + i] - m, 2);
    EXPECT_NEAR(m, 0.0, 1e-12);
    EXPECT_NEAR(v / 54, 1.0, 1e-3);
  }
}

TEST(Ops, GroupNormRejectsIndivisibleGroups) {
  auto x = random_leaf({1, 6, 2, 2, 2}, 19);
  V g(Tensor<double>({6}, 1.0)), b(Tensor<double>({6}));
  EXPECT_THROW(ops::group_norm(x, g, b, 4), ShapeError);
}

TEST(Ops, BatchNormTrainingMatchesFiniteDifferences) {
  auto x = random_leaf({2, 3, 2, 2, 2}, 20);
  auto g = random_leaf({3}, 21);
  auto b = random_leaf({3}, 22);
  Tensor<double> rm({3}), rv({3}, 1.0);
  auto r = grad_check([&] { return random_projection(ops::batch_norm(x, g, b, rm, rv, true)); },
                      {{"x", x}, {"gamma", g}, {"beta", b}});
  EXPECT_LT(r.max_rel_error, kTol) << r.worst;
}

TEST(Ops, BatchNormEvalUsesRunningStatistics) {
  V x(Tensor<double>({1, 1, 1, 1, 2}, std::vector<double>{3.0, 5.0}));
  V g(Tensor<double>({1}, 2.0)), b(Tensor<double>({1}, 1.0));
  Tensor<double> rm({1}, 1.0), rv({1}, 4.0);
  auto y = ops::batch_norm(x, g, b, rm, rv, false, 0.1, 0.0);
  EXPECT_NEAR(y.value()[0], 2.0 * (3.0 - 1.0) / 2.0 + 1.0, 1e-12);
  EXPECT_NEAR(y.value()[1], 2.0 * (5.0 - 1.0) / 2.0 + 1.0, 1e-12);
}

TEST(Ops, LstmBothDirectionsMatchFiniteDifferences) {
  for (bool reverse : {false, true}) {
    auto x = random_leaf({2, 3, 4}, 23);
    auto wih = random_leaf({8, 3}, 24, 0.5);
    auto whh = random_leaf({8, 2}, 25, 0.5);
    auto b = random_leaf({8}, 26, 0.5);
    auto r = grad_check([&] { return random_projection(ops::lstm_direction(x, wih, whh, b, reverse)); },
                        {{"x", x}, {"w_ih", wih}, {"w_hh", whh}, {"b", b}});
    EXPECT_LT(r.max_rel_error, kTol) << r.worst << " reverse=" << reverse;
  }
}

TEST(Ops, LstmReverseOfReversedInputMirrorsForward) {
  auto x = random_leaf({1, 2, 5}, 27);
  auto wih = random_leaf({12, 2}, 28);
  auto whh = random_leaf({12, 3}, 29);
  auto b = random_leaf({12}, 30);
  Tensor<double> flipped(x.shape());
  for (int c = 0; c < 2; ++c)
    for (int t = 0; t < 5; ++t) flipped[c * 5 + t] = x.value()[c * 5 + (4 - t)];
  auto fwd = ops::lstm_direction(x, wih, whh, b, false);
  auto bwd = ops::lstm_direction(V(flipped), wih, whh, b, true);
  for (int j = 0; j < 3; ++j)
    for (int t = 0; t < 5; ++t) EXPECT_NEAR(fwd.value()[j * 5 + t], bwd.value()[j * 5 + (4 - t)], 1e-12);
}

TEST(Ops, ResizeAndPoolingMatchFiniteDifferences) {
  auto x = random_leaf({1, 2, 2, 4, 3}, 31);
  auto r = grad_check([&] { return random_projection(ops::upsample2x(x)); }, {{"x", x}});
  EXPECT_LT(r.max_rel_error, kTol);
  auto y = random_leaf({1, 2, 4, 4, 2}, 32);
  r = grad_check([&] { return random_projection(ops::max_pool2(y)); }, {{"y", y}});
  EXPECT_LT(r.max_rel_error, kTol);
  r = grad_check([&] { return random_projection(ops::mean_over_plane(y)); }, {{"y", y}});
  EXPECT_LT(r.max_rel_error, kTol);
}

TEST(Ops, UpsampleOfConstantIsConstant) {
  V x(Tensor<double>({1, 1, 2, 2, 2}, 3.5));
  auto y = ops::upsample2x(x);
  EXPECT_EQ(y.shape(), (Shape{1, 1, 4, 4, 4}));
  for (double v : y.value().vec()) EXPECT_DOUBLE_EQ(v, 3.5);
}

TEST(Ops, UpsampleUsesHalfPixelCentres) {
  V x(Tensor<double>({1, 1, 1, 1, 2}, std::vector<double>{0.0, 1.0}));
  auto y = ops::resize_axis_linear(x, 4, 4);
  // Output centres map to source -0.25 (clamped), 0.25, 0.75, 1.25.
  EXPECT_NEAR(y.value()[0], 0.0, 1e-15);
  EXPECT_NEAR(y.value()[1], 0.25, 1e-15);
  EXPECT_NEAR(y.value()[2], 0.75, 1e-15);
  EXPECT_NEAR(y.value()[3], 1.0, 1e-15);
}

TEST(Ops, WeightedFusionMatchesFiniteDifferences) {
  auto a = random_leaf({1, 2, 2, 2, 2}, 33);
  auto c = random_leaf({1, 2, 2, 2, 2}, 34);
  V w(Tensor<double>({2}, std::vector<double>{0.7, 1.3}), true);
  auto r = grad_check([&] { return random_projection(ops::weighted_fusion<double>({a, c}, w)); },
                      {{"a", a}, {"c", c}, {"w", w}});
  EXPECT_LT(r.max_rel_error, kTol) << r.worst;
}

TEST(Ops, SingleInputFusionReturnsTheInputUpToEpsilon) {
  auto a = random_leaf({1, 1, 2, 2, 2}, 35);
  const double w = 0.8;
  V wv(Tensor<double>({1}, w));
  auto y = ops::weighted_fusion<double>({a}, wv);
  for (std::size_t i = 0; i < 8; ++i) EXPECT_NEAR(y.value()[i], a.value()[i] * w / (w + 1e-4), 1e-15);
  for (std::size_t i = 0; i < 8; ++i) EXPECT_NEAR(y.value()[i], a.value()[i], 2e-4 * std::abs(a.value()[i]));
}

TEST(Ops, ConcatAndSigmoidMatchFiniteDifferences) {
  auto a = random_leaf({2, 1, 3}, 36);
  auto c = random_leaf({2, 2, 3}, 37);
  auto r = grad_check([&] { return random_projection(ops::sigmoid(ops::concat_channels<double>({a, c}))); },
                      {{"a", a}, {"c", c}});
  EXPECT_LT(r.max_rel_error, kTol);
}

TEST(Ops, MetaInputsPropagateShapesOnly) {
  V x(Tensor<double>::meta({1, 4, 128, 128, 96}));
  Rng rng(1);
  V w(Tensor<double>({16, 4, 3, 3, 3}));
  V b(Tensor<double>({16}));
  auto y = ops::conv3d(x, w, b, 2, 1);
  EXPECT_TRUE(y.is_meta());
  EXPECT_EQ(y.shape(), (Shape{1, 16, 64, 64, 48}));
  EXPECT_EQ(ops::upsample2x(y).shape(), (Shape{1, 16, 128, 128, 96}));
  EXPECT_EQ(ops::mean_over_plane(y).shape(), (Shape{1, 16, 48}));
}

TEST(Ops, NoGradGuardSkipsGraph) {
  auto x = random_leaf({1, 3}, 38);
  NoGradGuard guard;
  auto y = ops::relu(x);
  EXPECT_FALSE(y.requires_grad());
}

}  // namespace
}  // namespace tumorseg
