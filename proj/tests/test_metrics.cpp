#include <gtest/gtest.h>

#include "hd95_oracle.hpp"
#include "tumorseg/core/rng.hpp"
#include "tumorseg/metrics.hpp"

using namespace tumorseg;
using tumorseg::testing::oracle_hd95;

namespace {

Grid3<std::uint8_t> mask_of(Extent3 s, std::initializer_list<Extent3> on) {
  Grid3<std::uint8_t> g(s);
  for (const auto& p : on) g(p[0], p[1], p[2]) = 1;
  return g;
}

// Random blobby mask: a few random boxes, optionally with salt noise.
Grid3<std::uint8_t> random_mask(Extent3 s, Rng& rng) {
  Grid3<std::uint8_t> g(s);
  const int boxes = 1 + static_cast<int>(rng.below(3));
  for (int b = 0; b < boxes; ++b) {
    Extent3 lo, hi;
    for (int a = 0; a < 3; ++a) {
      lo[a] = static_cast<std::int64_t>(rng.below(s[a]));
      hi[a] = std::min(s[a] - 1, lo[a] + static_cast<std::int64_t>(rng.below(8)));
    }
    for (auto i = lo[0]; i <= hi[0]; ++i)
      for (auto j = lo[1]; j <= hi[1]; ++j)
        for (auto k = lo[2]; k <= hi[2]; ++k) g(i, j, k) = 1;
  }
  for (auto& v : g.data)
    if (rng.bernoulli(0.01)) v = 1;
  return g;
}

}  // namespace

TEST(Dice, Examples) {
  const auto a = mask_of({4, 4, 4}, {{0, 0, 0}, {1, 0, 0}, {2, 0, 0}, {3, 0, 0}});
  const auto b = mask_of({4, 4, 4}, {{0, 0, 0}, {1, 0, 0}, {0, 1, 0}, {0, 2, 0}});
  const auto c = mask_of({4, 4, 4}, {{3, 3, 3}});
  EXPECT_DOUBLE_EQ(dice_score(a, a), 1.0);
  EXPECT_DOUBLE_EQ(dice_score(a, c), 0.0);
  EXPECT_DOUBLE_EQ(dice_score(a, b), 0.5);
  EXPECT_DOUBLE_EQ(dice_score(Grid3<std::uint8_t>({2, 2, 2}), Grid3<std::uint8_t>({2, 2, 2})), 1.0);
  EXPECT_THROW(dice_score(a, Grid3<std::uint8_t>({4, 4, 5})), ShapeError);
}

TEST(Dice, SymmetricAndPermutationInvariant) {
  Rng rng(6);
  for (int t = 0; t < 20; ++t) {
    auto a = random_mask({9, 8, 7}, rng), b = random_mask({9, 8, 7}, rng);
    EXPECT_DOUBLE_EQ(dice_score(a, b), dice_score(b, a));
    std::vector<std::size_t> perm(a.size());
    for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
    rng.shuffle(perm);
    auto pa = a, pb = b;
    for (std::size_t i = 0; i < perm.size(); ++i) {
      pa.data[perm[i]] = a.data[i];
      pb.data[perm[i]] = b.data[i];
    }
    EXPECT_DOUBLE_EQ(dice_score(a, b), dice_score(pa, pb));
  }
}

TEST(SensSpec, Examples) {
  Grid3<std::uint8_t> g({4, 4, 1}), p({4, 4, 1});
  // TP=3, FN=1, TN=10, FP=2
  for (int i = 0; i < 4; ++i) g.data[i] = 1;
  for (int i = 0; i < 3; ++i) p.data[i] = 1;
  p.data[4] = p.data[5] = 1;
  auto [sens, spec] = sensitivity_specificity(p, g);
  EXPECT_DOUBLE_EQ(sens, 0.75);
  EXPECT_NEAR(spec, 10.0 / 12.0, 1e-12);

  std::tie(sens, spec) = sensitivity_specificity(g, g);
  EXPECT_DOUBLE_EQ(sens, 1.0);
  EXPECT_DOUBLE_EQ(spec, 1.0);

  auto inv = g;
  for (auto& v : inv.data) v = !v;
  std::tie(sens, spec) = sensitivity_specificity(inv, g);
  EXPECT_DOUBLE_EQ(sens, 0.0);
  EXPECT_DOUBLE_EQ(spec, 0.0);

  Grid3<std::uint8_t> empty({4, 4, 1});
  EXPECT_DOUBLE_EQ(sensitivity_specificity(empty, empty).first, 1.0);
  EXPECT_DOUBLE_EQ(sensitivity_specificity(p, empty).first, 0.0);
}

TEST(Hd95, Examples) {
  const Extent3 s{8, 8, 8};
  const auto a = mask_of(s, {{1, 2, 2}});
  const auto b = mask_of(s, {{4, 2, 2}});
  EXPECT_DOUBLE_EQ(hd95(a, b, {1, 1, 1}), 3.0);
  EXPECT_DOUBLE_EQ(hd95(a, a, {1, 1, 1}), 0.0);
  EXPECT_DOUBLE_EQ(hd95(Grid3<std::uint8_t>(s), b, {1, 1, 1}), 373.13);
  EXPECT_DOUBLE_EQ(hd95(b, Grid3<std::uint8_t>(s), {1, 1, 1}), 373.13);
  EXPECT_DOUBLE_EQ(hd95(Grid3<std::uint8_t>(s), Grid3<std::uint8_t>(s), {1, 1, 1}), 0.0);
  MetricsConfig cfg;
  cfg.hd95_sentinel = 99.0;
  EXPECT_DOUBLE_EQ(hd95(Grid3<std::uint8_t>(s), b, {1, 1, 1}, cfg), 99.0);
}

TEST(Hd95, MatchesBruteForceOracleExactly) {
  Rng rng(2024);
  for (int t = 0; t < 60; ++t) {
    const auto a = random_mask({16, 16, 16}, rng), b = random_mask({16, 16, 16}, rng);
    EXPECT_EQ(hd95(a, b, {1, 1, 1}), oracle_hd95(a, b, {1, 1, 1})) << "pair " << t;
  }
}

TEST(Hd95, MatchesOracleWithAnisotropicSpacing) {
  Rng rng(77);
  for (int t = 0; t < 20; ++t) {
    const auto a = random_mask({12, 14, 10}, rng), b = random_mask({12, 14, 10}, rng);
    const std::array<double, 3> sp{0.8, 1.3, 2.7};
    EXPECT_NEAR(hd95(a, b, sp), oracle_hd95(a, b, sp), 1e-12) << "pair " << t;
  }
}

TEST(Hd95, ScalesWithUniformSpacing) {
  Rng rng(5);
  for (int t = 0; t < 10; ++t) {
    const auto a = random_mask({16, 16, 16}, rng), b = random_mask({16, 16, 16}, rng);
    const std::array<double, 3> sp{1.0, 1.5, 0.7};
    const double base = hd95(a, b, sp);
    for (double s : {0.5, 2.0, 3.0}) EXPECT_NEAR(hd95(a, b, {s * sp[0], s * sp[1], s * sp[2]}), s * base, 1e-9 * (1 + base));
  }
}

TEST(Hd95, Symmetric) {
  Rng rng(15);
  for (int t = 0; t < 10; ++t) {
    const auto a = random_mask({10, 10, 10}, rng), b = random_mask({10, 10, 10}, rng);
    EXPECT_EQ(hd95(a, b, {1, 1, 1}), hd95(b, a, {1, 1, 1}));
  }
}

TEST(Percentile, LinearInterpolation) {
  EXPECT_DOUBLE_EQ(percentile({1, 2, 3, 4, 5}, 50), 3.0);
  EXPECT_DOUBLE_EQ(percentile({0, 10}, 95), 9.5);
  EXPECT_DOUBLE_EQ(percentile({7}, 95), 7.0);
  EXPECT_DOUBLE_EQ(percentile({4, 1, 3, 2}, 100), 4.0);
}

TEST(EvaluateCase, PerfectPrediction) {
  RegionMask m({6, 6, 6});
  m.channels[0](2, 2, 2) = m.channels[0](2, 3, 2) = 1;
  m.channels[1](2, 2, 2) = 1;
  const auto cm = evaluate_case(m, m, {1, 1, 1});
  for (int r = 0; r < 3; ++r) {
    EXPECT_DOUBLE_EQ(cm.regions[r].dice, 1.0);
    EXPECT_DOUBLE_EQ(cm.regions[r].hd95, 0.0);
    EXPECT_DOUBLE_EQ(cm.regions[r].sensitivity, 1.0);
    EXPECT_DOUBLE_EQ(cm.regions[r].specificity, 1.0);
  }
}
