#include <gtest/gtest.h>

#include <cmath>

#include "gradcheck.hpp"
#include "tumorseg/losses.hpp"

using namespace tumorseg;
using tumorseg::testing::grad_check;

namespace {

std::vector<double> rand_probs(std::size_t n, Rng& rng) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.uniform(0.05, 0.95);
  return v;
}

std::vector<double> rand_binary(std::size_t n, Rng& rng) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.bernoulli(0.4) ? 1.0 : 0.0;
  return v;
}

// Independent evaluation of 1 - 2 sum(pg) / (sum p^2 + sum g^2 + eps).
double dice_ref(const std::vector<double>& p, const std::vector<double>& g, double eps) {
  long double a = 0, b = 0, c = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    a += (long double)p[i] * g[i];
    b += (long double)p[i] * p[i];
    c += (long double)g[i] * g[i];
  }
  return double(1 - 2 * a / (b + c + eps));
}

}  // namespace

TEST(DiceLoss, AllOnesEightVoxels) {
  std::vector<double> p(8, 1.0), g(8, 1.0);
  EXPECT_NEAR(losses::dice_loss<double>(p, g, 1e-5), 1.0 - 16.0 / (16.0 + 1e-5), 1e-15);
  EXPECT_NEAR(losses::dice_loss<double>(p, g, 1e-5), 6.25e-7, 1e-9);
}

TEST(DiceLoss, ZeroPredictionGivesOne) {
  for (std::size_t n : {1u, 5u, 100u}) {
    std::vector<double> p(n, 0.0), g(n, 1.0);
    EXPECT_DOUBLE_EQ(losses::dice_loss<double>(p, g, 1e-5), 1.0);
  }
}

TEST(DiceLoss, HalfOverlap) {
  std::vector<double> p{1, 1, 0, 0}, g{1, 0, 1, 0};
  EXPECT_NEAR(losses::dice_loss<double>(p, g, 1e-5), 1.0 - 2.0 / (4.0 + 1e-5), 1e-15);
  EXPECT_NEAR(losses::dice_loss<double>(p, g, 1e-5), 0.5, 1e-5);
}

TEST(DiceLoss, RangeAndSymmetryOnBinaryInputs) {
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    auto p = rand_binary(40, rng), g = rand_binary(40, rng);
    const double a = losses::dice_loss<double>(p, g, 1e-5), b = losses::dice_loss<double>(g, p, 1e-5);
    EXPECT_EQ(a, b);
    EXPECT_GE(a, 0.0);
    EXPECT_LE(a, 1.0);
    auto q = rand_probs(40, rng);
    const double c = losses::dice_loss<double>(q, g, 1e-5);
    EXPECT_NEAR(c, dice_ref(q, g, 1e-5), 1e-14);
    EXPECT_GE(c, 0.0);
    EXPECT_LE(c, 1.0);
  }
}

TEST(DiceLoss, ShapeMismatchThrows) {
  std::vector<double> p(3), g(4);
  EXPECT_THROW(losses::dice_loss<double>(p, g, 1e-5), ShapeError);
}

TEST(FocalLoss, GammaZeroReducesToCrossEntropy) {
  Rng rng(5);
  auto p = rand_probs(64, rng), y = rand_binary(64, rng);
  // alpha = 1 weights positives by 1 and negatives by 0.
  std::vector<double> ones(64, 1.0);
  EXPECT_NEAR(losses::focal_loss<double>(p, ones, 0.0, 1.0), losses::bce_loss<double>(p, ones), 1e-9);
  // alpha = 0.5 weights both classes by one half.
  EXPECT_NEAR(2.0 * losses::focal_loss<double>(p, y, 0.0, 0.5), losses::bce_loss<double>(p, y), 1e-9);
}

TEST(FocalLoss, PerfectConfidenceIsZero) {
  std::vector<double> p{1.0, 0.0}, y{1.0, 0.0};
  EXPECT_NEAR(losses::focal_loss<double>(p, y, 2.0, 0.25), 0.0, 1e-12);
}

TEST(FocalLoss, ClosedFormValue) {
  std::vector<double> p{0.5}, y{1.0};
  EXPECT_NEAR(losses::focal_loss<double>(p, y, 2.0, 0.25), 0.25 * 0.25 * std::log(2.0), 1e-12);
  EXPECT_NEAR(losses::focal_loss<double>(p, y, 2.0, 0.25), 0.04332, 1e-5);
}

TEST(FocalLoss, NonNegative) {
  Rng rng(9);
  for (int t = 0; t < 20; ++t) {
    auto p = rand_probs(30, rng), y = rand_binary(30, rng);
    EXPECT_GE(losses::focal_loss<double>(p, y, 2.0, 0.25), 0.0);
    EXPECT_GE(losses::bce_loss<double>(p, y), 0.0);
  }
}

TEST(BceLoss, HalfProbabilityIsLn2) {
  std::vector<double> p(10, 0.5), y{1, 0, 1, 1, 0, 0, 0, 1, 0, 1};
  EXPECT_NEAR(losses::bce_loss<double>(p, y), std::log(2.0), 1e-12);
}

TEST(BceLoss, ExactPredictionNearZeroAndClampFloorFinite) {
  std::vector<double> p{1.0, 0.0, 1.0}, y{1.0, 0.0, 1.0};
  EXPECT_LT(losses::bce_loss<double>(p, y), 1e-6);
  std::vector<double> bad{0.0}, one{1.0};
  const double v = losses::bce_loss<double>(bad, one);
  EXPECT_TRUE(std::isfinite(v));
  EXPECT_NEAR(v, -std::log(1e-7), 1e-9);
}

TEST(LossGradients, MatchFiniteDifferences) {
  Rng rng(11);
  for (std::size_t n : {1u, 7u, 64u}) {
    auto g = rand_binary(n, rng);
    Tensor<double> target({1, 1, static_cast<std::int64_t>(n)}, g);
    Var<double> p(Tensor<double>({1, 1, static_cast<std::int64_t>(n)}, rand_probs(n, rng)), true);
    LossConfig cfg;
    auto r1 = grad_check([&] { return losses::dice_loss(p, target, cfg.epsilon); }, {{"p", p}});
    auto r2 = grad_check([&] { return losses::focal_loss(p, target, cfg); }, {{"p", p}});
    auto r3 = grad_check([&] { return losses::bce_loss(p, target, cfg); }, {{"p", p}});
    EXPECT_LT(r1.max_rel_error, 1e-4) << n;
    EXPECT_LT(r2.max_rel_error, 1e-4) << n;
    EXPECT_LT(r3.max_rel_error, 1e-4) << n;
  }
}

TEST(LossGradients, FocalGammaOneAndHalf) {
  Rng rng(12);
  Tensor<double> target({1, 1, 32}, rand_binary(32, rng));
  Var<double> p(Tensor<double>({1, 1, 32}, rand_probs(32, rng)), true);
  for (double gamma : {0.0, 0.5, 1.0, 3.0}) {
    LossConfig cfg;
    cfg.focal_gamma = gamma;
    auto r = grad_check([&] { return losses::focal_loss(p, target, cfg); }, {{"p", p}});
    EXPECT_LT(r.max_rel_error, 1e-4) << gamma;
  }
}

TEST(DiceLoss, RegionAveragedOverChannels) {
  // Channel 0 perfect, channel 1 empty prediction -> mean of (~0, 1).
  Tensor<double> probs({1, 2, 2}, std::vector<double>{1, 1, 0, 0});
  Tensor<double> gt({1, 2, 2}, std::vector<double>{1, 1, 1, 1});
  auto l = losses::dice_loss(Var<double>(probs), gt, 1e-5);
  EXPECT_NEAR(l.value().item(), 0.5 * ((1.0 - 4.0 / (4.0 + 1e-5)) + 1.0), 1e-12);
}

TEST(SliceTargets, AnyVoxelOnSlice) {
  Tensor<double> regions({1, 3, 2, 2, 3});
  regions[0 * 12 + (1 * 2 + 0) * 3 + 2] = 1;  // WT at (1,0,2)
  regions[2 * 12 + (0 * 2 + 1) * 3 + 0] = 1;  // ET at (0,1,0)
  auto s = slice_targets(regions);
  ASSERT_EQ(s.shape(), (Shape{1, 3, 3}));
  EXPECT_EQ(s.vec(), (std::vector<double>{0, 0, 1, 0, 0, 0, 1, 0, 0}));
}

TEST(TotalLoss, EqualsSumOfBreakdown) {
  Rng rng(21);
  Tensor<double> seg({2, 3, 4, 4, 4}), gt({2, 3, 4, 4, 4});
  for (auto& v : seg.vec()) v = rng.normal();
  for (auto& v : gt.vec()) v = rng.bernoulli(0.3);
  auto sgt = slice_targets(gt);
  Tensor<double> sl({2, 3, 4});
  for (auto& v : sl.vec()) v = rng.normal();
  auto out = total_loss<double>({Var<double>(seg)}, Var<double>(sl), gt, sgt, LossConfig{});
  EXPECT_NEAR(out.total_value(), out.focal_seg + out.dice + out.focal_cls + out.bce, 1e-9);
}

TEST(TotalLoss, PerfectPredictionsNearZero) {
  Rng rng(22);
  Tensor<double> gt({1, 3, 6, 6, 6});
  for (std::size_t i = 0; i < gt.numel(); ++i) gt[i] = rng.bernoulli(0.5);
  auto sgt = slice_targets(gt);
  Tensor<double> seg(gt.shape()), sl(sgt.shape());
  for (std::size_t i = 0; i < gt.numel(); ++i) seg[i] = gt[i] > 0.5 ? 30.0 : -30.0;
  for (std::size_t i = 0; i < sgt.numel(); ++i) sl[i] = sgt[i] > 0.5 ? 30.0 : -30.0;
  auto out = total_loss<double>({Var<double>(seg)}, Var<double>(sl), gt, sgt, LossConfig{});
  EXPECT_LT(out.total_value(), 1e-3);
}

TEST(TotalLoss, AdditivityOfComponents) {
  // Components combine by plain summation.
  auto scalar = [](double v) { return ops::constant(Tensor<double>(Shape{}, std::vector<double>{v})); };
  auto a = scalar(0.1), b = scalar(0.2), c = scalar(0.3), d = scalar(0.4);
  EXPECT_NEAR(ops::add(ops::add(a, b), ops::add(c, d)).value().item(), 1.0, 1e-15);
}

TEST(TotalLoss, DeepSupervisionAveragesBranches) {
  Rng rng(23);
  Tensor<double> gt({1, 3, 4, 4, 2}), b1(gt.shape()), b2(gt.shape()), sl({1, 3, 2});
  for (auto& v : gt.vec()) v = rng.bernoulli(0.5);
  for (auto& v : b1.vec()) v = rng.normal();
  for (auto& v : b2.vec()) v = rng.normal();
  auto sgt = slice_targets(gt);
  LossConfig cfg;
  auto l1 = total_loss<double>({Var<double>(b1)}, Var<double>(sl), gt, sgt, cfg);
  auto l2 = total_loss<double>({Var<double>(b2)}, Var<double>(sl), gt, sgt, cfg);
  auto both = total_loss<double>({Var<double>(b1), Var<double>(b2)}, Var<double>(sl), gt, sgt, cfg);
  EXPECT_NEAR(both.dice, 0.5 * (l1.dice + l2.dice), 1e-12);
  EXPECT_NEAR(both.focal_seg, 0.5 * (l1.focal_seg + l2.focal_seg), 1e-12);
}

TEST(TotalLoss, GradientThroughSigmoidMatchesFiniteDifferences) {
  Rng rng(24);
  Tensor<double> gt({1, 3, 3, 3, 4});
  for (auto& v : gt.vec()) v = rng.bernoulli(0.4);
  auto sgt = slice_targets(gt);
  Var<double> seg(Tensor<double>(gt.shape()), true), sl(Tensor<double>(sgt.shape()), true);
  for (auto& v : seg.mutable_value().vec()) v = rng.normal();
  for (auto& v : sl.mutable_value().vec()) v = rng.normal();
  auto r = grad_check([&] { return total_loss<double>({seg}, sl, gt, sgt, LossConfig{}).total; },
                      {{"seg", seg}, {"slice", sl}});
  EXPECT_LT(r.max_rel_error, 1e-4) << r.worst;
}

TEST(LossConfig, Validation) {
  LossConfig c;
  EXPECT_NO_THROW(c.validate());
  c.epsilon = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.focal_alpha = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.focal_gamma = -1;
  EXPECT_THROW(c.validate(), ConfigError);
}
