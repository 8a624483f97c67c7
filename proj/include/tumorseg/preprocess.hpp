#pragma once

// Foreground cropping, intensity normalization, padding, axis reordering and
// the training-time augmentations (flip, intensity scale, intensity shift,
// random crop).

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <optional>

#include "tumorseg/core/rng.hpp"
#include "tumorseg/core/tensor.hpp"
#include "tumorseg/data_model.hpp"

namespace tumorseg {

// ---- grid helpers ---------------------------------------------------------

template <class T>
Grid3<T> crop_grid(const Grid3<T>& g, const CropBox& box) {
  const Extent3 e = box.extent();
  Grid3<T> out(e);
  for (std::int64_t i = 0; i < e[0]; ++i)
    for (std::int64_t j = 0; j < e[1]; ++j)
      std::copy_n(&g(box.lo[0] + i, box.lo[1] + j, box.lo[2]), e[2], &out(i, j, 0));
  return out;
}

// Places `g` at `box` inside a zero grid of extent `full`.
template <class T>
Grid3<T> uncrop_grid(const Grid3<T>& g, const CropBox& box, const Extent3& full) {
  if (g.shape != box.extent()) throw ShapeError("uncrop: grid does not match the crop box");
  Grid3<T> out(full);
  for (std::int64_t i = 0; i < g.shape[0]; ++i)
    for (std::int64_t j = 0; j < g.shape[1]; ++j)
      std::copy_n(&g(i, j, 0), g.shape[2], &out(box.lo[0] + i, box.lo[1] + j, box.lo[2]));
  return out;
}

// Zero padding; `before[a]` voxels are inserted ahead of axis a.
struct Padding {
  Extent3 before{0, 0, 0};
  Extent3 after{0, 0, 0};
  bool operator==(const Padding&) const = default;
};

template <class T>
Grid3<T> pad_grid(const Grid3<T>& g, const Padding& p) {
  Extent3 e;
  for (int a = 0; a < 3; ++a) e[a] = g.shape[a] + p.before[a] + p.after[a];
  Grid3<T> out(e);
  for (std::int64_t i = 0; i < g.shape[0]; ++i)
    for (std::int64_t j = 0; j < g.shape[1]; ++j)
      std::copy_n(&g(i, j, 0), g.shape[2], &out(i + p.before[0], j + p.before[1], p.before[2]));
  return out;
}

template <class T>
Grid3<T> unpad_grid(const Grid3<T>& g, const Padding& p) {
  CropBox box;
  for (int a = 0; a < 3; ++a) {
    box.lo[a] = p.before[a];
    box.hi[a] = g.shape[a] - p.after[a] - 1;
  }
  return crop_grid(g, box);
}

// Symmetric padding (extra voxel after) up to at least `target` per axis.
inline Padding symmetric_padding_to(const Extent3& shape, const Extent3& target) {
  Padding p;
  for (int a = 0; a < 3; ++a) {
    const std::int64_t total = std::max<std::int64_t>(0, target[a] - shape[a]);
    p.before[a] = total / 2;
    p.after[a] = total - total / 2;
  }
  return p;
}

inline Padding symmetric_padding_to_multiple(const Extent3& shape, std::int64_t multiple) {
  Extent3 target;
  for (int a = 0; a < 3; ++a) target[a] = (shape[a] + multiple - 1) / multiple * multiple;
  return symmetric_padding_to(shape, target);
}

template <class T>
Grid3<T> flip_grid(const Grid3<T>& g, int axis) {
  Grid3<T> out(g.shape);
  const auto& s = g.shape;
  for (std::int64_t i = 0; i < s[0]; ++i)
    for (std::int64_t j = 0; j < s[1]; ++j)
      for (std::int64_t k = 0; k < s[2]; ++k) {
        const std::int64_t ii = axis == 0 ? s[0] - 1 - i : i, jj = axis == 1 ? s[1] - 1 - j : j,
                           kk = axis == 2 ? s[2] - 1 - k : k;
        out(ii, jj, kk) = g(i, j, k);
      }
  return out;
}

// out axis a takes input axis perm[a].
template <class T>
Grid3<T> permute_grid(const Grid3<T>& g, const std::array<int, 3>& perm) {
  Extent3 e{g.shape[perm[0]], g.shape[perm[1]], g.shape[perm[2]]};
  Grid3<T> out(e);
  std::array<std::int64_t, 3> src{};
  for (std::int64_t i = 0; i < e[0]; ++i)
    for (std::int64_t j = 0; j < e[1]; ++j)
      for (std::int64_t k = 0; k < e[2]; ++k) {
        src[perm[0]] = i;
        src[perm[1]] = j;
        src[perm[2]] = k;
        out(i, j, k) = g(src[0], src[1], src[2]);
      }
  return out;
}

inline std::array<int, 3> inverse_permutation(const std::array<int, 3>& p) {
  std::array<int, 3> inv{};
  for (int a = 0; a < 3; ++a) inv[p[a]] = a;
  return inv;
}

// Permutation that moves the axial axis last, keeping the other two in order.
inline std::array<int, 3> axial_last_permutation(int axial_axis) {
  switch (axial_axis) {
    case 0: return {1, 2, 0};
    case 1: return {0, 2, 1};
    default: return {0, 1, 2};
  }
}

// ---- volume-level operations ----------------------------------------------

// Tightest box holding every voxel where any modality is nonzero.
inline CropBox compute_foreground_crop(const MultimodalVolume& v) {
  const auto& s = v.shape();
  CropBox box{{s[0], s[1], s[2]}, {-1, -1, -1}};
  for (std::int64_t i = 0; i < s[0]; ++i)
    for (std::int64_t j = 0; j < s[1]; ++j)
      for (std::int64_t k = 0; k < s[2]; ++k) {
        bool any = false;
        for (const auto& m : v.modalities()) any = any || m(i, j, k) != 0.0f;
        if (!any) continue;
        const std::array<std::int64_t, 3> idx{i, j, k};
        for (int a = 0; a < 3; ++a) {
          box.lo[a] = std::min(box.lo[a], idx[a]);
          box.hi[a] = std::max(box.hi[a], idx[a]);
        }
      }
  if (box.hi[0] < 0) throw EmptyVolume("every voxel of every modality is zero");
  return box;
}

inline MultimodalVolume crop(const MultimodalVolume& v, const CropBox& box) {
  for (int a = 0; a < 3; ++a)
    if (box.lo[a] < 0 || box.hi[a] >= v.shape()[a] || box.lo[a] > box.hi[a])
      throw ShapeError("crop box outside the volume");
  std::array<Grid3<float>, 4> out;
  for (int m = 0; m < 4; ++m) out[m] = crop_grid(v.modalities()[m], box);
  return MultimodalVolume(std::move(out), v.geometry());
}

inline RegionMask crop(const RegionMask& r, const CropBox& box) {
  RegionMask out;
  for (int c = 0; c < 3; ++c) out.channels[c] = crop_grid(r.channels[c], box);
  return out;
}

// Per modality z-score over nonzero voxels; zeros stay zero.
inline MultimodalVolume normalize(const MultimodalVolume& v) {
  std::array<Grid3<float>, 4> out = v.modalities();
  for (int m = 0; m < 4; ++m) {
    auto& d = out[m].data;
    double sum = 0;
    std::size_t n = 0;
    for (float x : d)
      if (x != 0.0f) {
        sum += x;
        ++n;
      }
    if (n == 0) throw DegenerateIntensity(std::string(kModalityNames[m]) + ": no nonzero voxels");
    const double mean = sum / static_cast<double>(n);
    double ss = 0;
    for (float x : d)
      if (x != 0.0f) ss += (x - mean) * (x - mean);
    const double sd = std::sqrt(ss / static_cast<double>(n));
    if (!(sd > 1e-8 * std::max(1.0, std::fabs(mean))))
      throw DegenerateIntensity(std::string(kModalityNames[m]) + ": constant foreground intensity");
    for (float& x : d)
      if (x != 0.0f) x = static_cast<float>((x - mean) / sd);
  }
  return MultimodalVolume(std::move(out), v.geometry());
}

// (1, 4, X, Y, Z) network input.
template <class T>
Tensor<T> to_tensor(const MultimodalVolume& v) {
  const auto& s = v.shape();
  Tensor<T> t({1, 4, s[0], s[1], s[2]});
  const std::size_t n = v.modalities()[0].size();
  for (int m = 0; m < 4; ++m)
    std::transform(v.modalities()[m].data.begin(), v.modalities()[m].data.end(), t.data() + m * n,
                   [](float x) { return static_cast<T>(x); });
  return t;
}

// (1, 3, X, Y, Z) region targets.
template <class T>
Tensor<T> to_tensor(const RegionMask& r) {
  const auto& s = r.shape();
  Tensor<T> t({1, 3, s[0], s[1], s[2]});
  const std::size_t n = r.channels[0].size();
  for (int c = 0; c < 3; ++c)
    std::transform(r.channels[c].data.begin(), r.channels[c].data.end(), t.data() + c * n,
                   [](std::uint8_t x) { return static_cast<T>(x); });
  return t;
}

// Stacks (1, C, ...) tensors of identical shape along the batch axis.
template <class T>
Tensor<T> stack_batch(const std::vector<Tensor<T>>& items) {
  if (items.empty()) throw ShapeError("stack_batch: no items");
  Shape s = items[0].shape();
  for (const auto& t : items)
    if (t.shape() != s) throw ShapeError("stack_batch: shapes differ");
  s[0] = static_cast<std::int64_t>(items.size());
  Tensor<T> out(s);
  for (std::size_t b = 0; b < items.size(); ++b)
    std::copy(items[b].data(), items[b].data() + items[b].numel(), out.data() + b * items[b].numel());
  return out;
}

// ---- augmentation -----------------------------------------------------------

struct AugmentConfig {
  double flip_prob = 0.5;
  std::array<double, 2> scale_range{0.9, 1.1};
  std::array<double, 2> shift_range{-0.1, 0.1};
  double intensity_aug_prob = 0.8;  // drawn independently for scale and for shift
  Extent3 crop_size{128, 128, 96};
  std::uint64_t seed = 0;

  void validate() const {
    auto prob = [](double p, const char* f) {
      if (!(p >= 0 && p <= 1)) throw ConfigError(std::string("augment.") + f + ": must lie in [0, 1]");
    };
    prob(flip_prob, "flip_prob");
    prob(intensity_aug_prob, "intensity_aug_prob");
    if (!(scale_range[0] > 0 && scale_range[0] <= scale_range[1]))
      throw ConfigError("augment.scale_range: must be an interval inside (0, inf)");
    if (!(shift_range[0] <= shift_range[1])) throw ConfigError("augment.shift_range: lower bound exceeds upper");
    for (auto c : crop_size)
      if (c <= 0) throw ConfigError("augment.crop_size: components must be positive");
  }
};

// The random draws of one augmentation call, separated from their
// application so that individual steps can be forced in tests.
struct AugmentPlan {
  std::array<bool, 3> flip{false, false, false};
  std::optional<double> scale;
  std::optional<double> shift;
  Extent3 origin{0, 0, 0};  // crop origin in the padded volume
};

inline AugmentPlan draw_augment_plan(const Extent3& shape, const AugmentConfig& cfg, Rng& rng) {
  AugmentPlan plan;
  for (int a = 0; a < 3; ++a) plan.flip[a] = rng.bernoulli(cfg.flip_prob);
  if (rng.bernoulli(cfg.intensity_aug_prob)) plan.scale = rng.uniform(cfg.scale_range[0], cfg.scale_range[1]);
  if (rng.bernoulli(cfg.intensity_aug_prob)) plan.shift = rng.uniform(cfg.shift_range[0], cfg.shift_range[1]);
  for (int a = 0; a < 3; ++a) {
    const std::int64_t padded = std::max(shape[a], cfg.crop_size[a]);
    plan.origin[a] = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(padded - cfg.crop_size[a] + 1)));
  }
  return plan;
}

inline std::pair<MultimodalVolume, RegionMask> apply_augment_plan(const MultimodalVolume& v, const RegionMask& m,
                                                                  const AugmentPlan& plan, const Extent3& crop_size) {
  if (v.shape() != m.shape()) throw ShapeError("augment: image and mask shapes differ");
  const Padding pad = symmetric_padding_to(v.shape(), crop_size);
  std::array<Grid3<float>, 4> img;
  RegionMask mask;
  for (int c = 0; c < 4; ++c) img[c] = pad_grid(v.modalities()[c], pad);
  for (int c = 0; c < 3; ++c) mask.channels[c] = pad_grid(m.channels[c], pad);

  for (int a = 0; a < 3; ++a) {
    if (!plan.flip[a]) continue;
    for (auto& g : img) g = flip_grid(g, a);
    for (auto& g : mask.channels) g = flip_grid(g, a);
  }
  if (plan.scale)
    for (auto& g : img)
      for (float& x : g.data) x = static_cast<float>(x * *plan.scale);
  if (plan.shift)
    for (auto& g : img)
      for (float& x : g.data) x = static_cast<float>(x + *plan.shift);

  CropBox box;
  for (int a = 0; a < 3; ++a) {
    box.lo[a] = plan.origin[a];
    box.hi[a] = plan.origin[a] + crop_size[a] - 1;
    if (box.lo[a] < 0 || box.hi[a] >= img[0].shape[a]) throw ShapeError("augment: crop origin out of range");
  }
  for (auto& g : img) g = crop_grid(g, box);
  for (auto& g : mask.channels) g = crop_grid(g, box);
  return {MultimodalVolume(std::move(img), v.geometry()), std::move(mask)};
}

// flip -> scale -> shift -> crop, deterministic in the RNG state.
inline std::pair<MultimodalVolume, RegionMask> augment(const MultimodalVolume& v, const RegionMask& m,
                                                       const AugmentConfig& cfg, Rng& rng) {
  return apply_augment_plan(v, m, draw_augment_plan(v.shape(), cfg, rng), cfg.crop_size);
}

}  // namespace tumorseg
