#include <gtest/gtest.h>

#include "tumorseg/preprocess.hpp"

using namespace tumorseg;

namespace {

MultimodalVolume volume_from(std::array<Grid3<float>, 4> g) { return MultimodalVolume(std::move(g), {}); }

// Random values on a random sub-box, zeros elsewhere.
std::pair<MultimodalVolume, CropBox> random_boxed_volume(Rng& rng, Extent3 s) {
  CropBox box;
  for (int a = 0; a < 3; ++a) {
    box.lo[a] = static_cast<std::int64_t>(rng.below(s[a]));
    box.hi[a] = box.lo[a] + static_cast<std::int64_t>(rng.below(s[a] - box.lo[a]));
  }
  std::array<Grid3<float>, 4> g;
  for (auto& m : g) m = Grid3<float>(s);
  // Make sure every bound is attained by at least one modality.
  for (std::int64_t i = box.lo[0]; i <= box.hi[0]; ++i)
    for (std::int64_t j = box.lo[1]; j <= box.hi[1]; ++j)
      for (std::int64_t k = box.lo[2]; k <= box.hi[2]; ++k) {
        const bool corner = (i == box.lo[0] || i == box.hi[0]) && (j == box.lo[1] || j == box.hi[1]) &&
                            (k == box.lo[2] || k == box.hi[2]);
        const int m = static_cast<int>(rng.below(4));
        if (corner || rng.bernoulli(0.3)) g[m](i, j, k) = static_cast<float>(rng.uniform(0.5, 5.0));
      }
  return {volume_from(std::move(g)), box};
}

RegionMask random_mask(Extent3 s, Rng& rng) {
  RegionMask m(s);
  for (auto& c : m.channels)
    for (auto& v : c.data) v = rng.bernoulli(0.3);
  return m;
}

}  // namespace

TEST(ForegroundCrop, SpecExample) {
  std::array<Grid3<float>, 4> g;
  for (auto& m : g) m = Grid3<float>({32, 32, 40});
  g[2](10, 5, 0) = 1.0f;
  g[0](20, 25, 30) = -2.0f;
  g[3](15, 12, 17) = 3.0f;
  const CropBox box = compute_foreground_crop(volume_from(g));
  EXPECT_EQ(box.lo, (Extent3{10, 5, 0}));
  EXPECT_EQ(box.hi, (Extent3{20, 25, 30}));
}

TEST(ForegroundCrop, FullAndEmpty) {
  std::array<Grid3<float>, 4> g;
  for (auto& m : g) m = Grid3<float>({4, 5, 6}, 1.0f);
  const CropBox box = compute_foreground_crop(volume_from(g));
  EXPECT_EQ(box.lo, (Extent3{0, 0, 0}));
  EXPECT_EQ(box.hi, (Extent3{3, 4, 5}));
  for (auto& m : g) m = Grid3<float>({4, 5, 6});
  EXPECT_THROW(compute_foreground_crop(volume_from(g)), EmptyVolume);
}

TEST(ForegroundCrop, TightAndNeverDiscardsForeground) {
  Rng rng(9);
  for (int trial = 0; trial < 20; ++trial) {
    auto [v, truth] = random_boxed_volume(rng, {12, 10, 9});
    const CropBox box = compute_foreground_crop(v);
    EXPECT_EQ(box, truth);
    const auto& s = v.shape();
    for (std::int64_t i = 0; i < s[0]; ++i)
      for (std::int64_t j = 0; j < s[1]; ++j)
        for (std::int64_t k = 0; k < s[2]; ++k) {
          const bool inside = i >= box.lo[0] && i <= box.hi[0] && j >= box.lo[1] && j <= box.hi[1] &&
                              k >= box.lo[2] && k <= box.hi[2];
          if (!inside)
            for (const auto& m : v.modalities()) ASSERT_EQ(m(i, j, k), 0.0f);
        }
  }
}

TEST(Normalize, TwoValueForeground) {
  std::array<Grid3<float>, 4> g;
  for (auto& m : g) {
    m = Grid3<float>({2, 2, 1});
    m.data = {2.0f, 4.0f, 0.0f, 0.0f};
  }
  const auto n = normalize(volume_from(g));
  for (const auto& m : n.modalities()) {
    EXPECT_NEAR(m.data[0], -1.0f, 1e-7);
    EXPECT_NEAR(m.data[1], 1.0f, 1e-7);
    EXPECT_EQ(m.data[2], 0.0f);
    EXPECT_EQ(m.data[3], 0.0f);
  }
}

TEST(Normalize, IdempotentOnStandardizedData) {
  Rng rng(4);
  std::array<Grid3<float>, 4> g;
  for (auto& m : g) {
    m = Grid3<float>({8, 8, 8});
    for (auto& v : m.data) v = rng.bernoulli(0.2) ? 0.0f : static_cast<float>(rng.uniform(1, 9));
  }
  const auto once = normalize(volume_from(g));
  const auto twice = normalize(once);
  for (int m = 0; m < 4; ++m)
    for (std::size_t i = 0; i < once.modalities()[m].size(); ++i)
      EXPECT_NEAR(once.modalities()[m].data[i], twice.modalities()[m].data[i], 1e-6);
}

TEST(Normalize, ConstantForegroundIsDegenerate) {
  std::array<Grid3<float>, 4> g;
  for (auto& m : g) {
    m = Grid3<float>({3, 3, 3});
    for (std::size_t i = 0; i < m.size(); ++i) m.data[i] = static_cast<float>(i % 5);
  }
  g[1].data.assign(27, 0.0f);
  g[1].data[4] = g[1].data[9] = 7.0f;
  EXPECT_THROW(normalize(volume_from(g)), DegenerateIntensity);
}

TEST(Geometry, PadUnpadAndCropUncropAreInverse) {
  Rng rng(12);
  for (int trial = 0; trial < 20; ++trial) {
    const Extent3 s{static_cast<std::int64_t>(3 + rng.below(9)), static_cast<std::int64_t>(3 + rng.below(9)),
                    static_cast<std::int64_t>(3 + rng.below(9))};
    Grid3<std::uint16_t> g(s);
    for (std::size_t i = 0; i < g.size(); ++i) g.data[i] = static_cast<std::uint16_t>(i + 1);
    const Padding p = symmetric_padding_to_multiple(s, 16);
    const auto padded = pad_grid(g, p);
    for (int a = 0; a < 3; ++a) {
      EXPECT_EQ(padded.shape[a] % 16, 0);
      EXPECT_LE(p.after[a] - p.before[a], 1);
      EXPECT_GE(p.after[a] - p.before[a], 0);
    }
    EXPECT_EQ(unpad_grid(padded, p), g);

    CropBox box;
    for (int a = 0; a < 3; ++a) {
      box.lo[a] = static_cast<std::int64_t>(rng.below(s[a]));
      box.hi[a] = box.lo[a] + static_cast<std::int64_t>(rng.below(s[a] - box.lo[a]));
    }
    const auto back = uncrop_grid(crop_grid(g, box), box, s);
    for (std::int64_t i = 0; i < s[0]; ++i)
      for (std::int64_t j = 0; j < s[1]; ++j)
        for (std::int64_t k = 0; k < s[2]; ++k) {
          const bool inside = i >= box.lo[0] && i <= box.hi[0] && j >= box.lo[1] && j <= box.hi[1] &&
                              k >= box.lo[2] && k <= box.hi[2];
          ASSERT_EQ(back(i, j, k), inside ? g(i, j, k) : 0);
        }
  }
}

TEST(Geometry, PermutationInverse) {
  Grid3<int> g({2, 3, 4});
  for (std::size_t i = 0; i < g.size(); ++i) g.data[i] = static_cast<int>(i);
  for (int axial = 0; axial < 3; ++axial) {
    const auto p = axial_last_permutation(axial);
    const auto moved = permute_grid(g, p);
    EXPECT_EQ(moved.shape[2], g.shape[axial]);
    EXPECT_EQ(permute_grid(moved, inverse_permutation(p)), g);
  }
}

TEST(Augment, ForcedFlipAxisZero) {
  Rng rng(1);
  std::array<Grid3<float>, 4> g;
  for (auto& m : g) {
    m = Grid3<float>({5, 4, 3});
    for (auto& v : m.data) v = static_cast<float>(rng.uniform(1, 2));
  }
  const auto v = volume_from(g);
  const auto mask = random_mask({5, 4, 3}, rng);
  AugmentPlan plan;
  plan.flip = {true, false, false};
  const auto [img, m] = apply_augment_plan(v, mask, plan, {5, 4, 3});
  for (std::int64_t i = 0; i < 5; ++i)
    for (std::int64_t j = 0; j < 4; ++j)
      for (std::int64_t k = 0; k < 3; ++k) {
        for (int c = 0; c < 4; ++c) EXPECT_EQ(img.modalities()[c](4 - i, j, k), v.modalities()[c](i, j, k));
        for (int r = 0; r < 3; ++r) EXPECT_EQ(m.channels[r](4 - i, j, k), mask.channels[r](i, j, k));
      }
}

TEST(Augment, ScaleOnly) {
  std::array<Grid3<float>, 4> g;
  for (auto& m : g) m = Grid3<float>({2, 2, 2}, 1.0f);
  AugmentPlan plan;
  plan.scale = 0.9;
  const auto [img, m] = apply_augment_plan(volume_from(g), RegionMask({2, 2, 2}), plan, {2, 2, 2});
  for (const auto& c : img.modalities())
    for (float v : c.data) EXPECT_FLOAT_EQ(v, 0.9f);
}

TEST(Augment, AllSkippedIsIdentity) {
  Rng rng(2);
  std::array<Grid3<float>, 4> g;
  for (auto& m : g) {
    m = Grid3<float>({6, 5, 4});
    for (auto& v : m.data) v = static_cast<float>(rng.normal());
  }
  const auto v = volume_from(g);
  const auto mask = random_mask({6, 5, 4}, rng);
  AugmentConfig cfg;
  cfg.flip_prob = 0;
  cfg.intensity_aug_prob = 0;
  cfg.crop_size = {6, 5, 4};
  Rng r(5);
  const auto [img, m] = augment(v, mask, cfg, r);
  EXPECT_EQ(img.modalities(), v.modalities());
  EXPECT_EQ(m, mask);
}

TEST(Augment, PropertiesOverRandomDraws) {
  Rng rng(3);
  AugmentConfig cfg;
  cfg.crop_size = {8, 8, 6};
  for (int trial = 0; trial < 20; ++trial) {
    const Extent3 s{static_cast<std::int64_t>(4 + rng.below(10)), static_cast<std::int64_t>(4 + rng.below(10)),
                    static_cast<std::int64_t>(4 + rng.below(10))};
    std::array<Grid3<float>, 4> g;
    for (auto& m : g) {
      m = Grid3<float>(s);
      for (auto& v : m.data) v = static_cast<float>(rng.normal());
    }
    const auto v = volume_from(g);
    const auto mask = random_mask(s, rng);
    const std::uint64_t seed = rng.next_u64();
    Rng a(seed), b(seed);
    const auto [img1, m1] = augment(v, mask, cfg, a);
    const auto [img2, m2] = augment(v, mask, cfg, b);
    EXPECT_EQ(img1.shape(), cfg.crop_size);
    EXPECT_EQ(m1.shape(), cfg.crop_size);
    EXPECT_EQ(img1.modalities(), img2.modalities());
    EXPECT_EQ(m1, m2);
    for (const auto& c : m1.channels)
      for (auto x : c.data) ASSERT_TRUE(x == 0 || x == 1);
  }
}

TEST(Augment, DoubleFlipIsIdentity) {
  Rng rng(8);
  Grid3<float> g({4, 5, 6});
  for (auto& v : g.data) v = static_cast<float>(rng.normal());
  for (int a = 0; a < 3; ++a) EXPECT_EQ(flip_grid(flip_grid(g, a), a), g);
}

TEST(Augment, ConfigValidation) {
  AugmentConfig cfg;
  EXPECT_NO_THROW(cfg.validate());
  cfg.flip_prob = 1.5;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = {};
  cfg.scale_range = {0.0, 1.1};
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = {};
  cfg.crop_size = {128, 0, 96};
  EXPECT_THROW(cfg.validate(), ConfigError);
}
