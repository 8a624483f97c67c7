#pragma once

// Per-region evaluation metrics: Dice, HD95, sensitivity and specificity.

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <vector>

#include "tumorseg/data_model.hpp"

namespace tumorseg {

struct MetricsConfig {
  double hd95_sentinel = 373.13;  // returned when exactly one mask is empty
};

struct RegionMetrics {
  double dice = 0, hd95 = 0, sensitivity = 0, specificity = 0;
};

struct CaseMetrics {
  std::array<RegionMetrics, 3> regions;  // WT, TC, ET
  const RegionMetrics& operator[](Region r) const { return regions[static_cast<int>(r)]; }
};

namespace detail {
template <class A, class B>
void require_same_extent(const Grid3<A>& a, const Grid3<B>& b, const char* what) {
  if (a.shape != b.shape) throw ShapeError(std::string(what) + ": masks differ in shape");
}
}  // namespace detail

// 2|P & G| / (|P| + |G|); both empty -> 1.
inline double dice_score(const Grid3<std::uint8_t>& pred, const Grid3<std::uint8_t>& gt) {
  detail::require_same_extent(pred, gt, "dice_score");
  std::size_t inter = 0, np = 0, ng = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred.data[i] != 0, g = gt.data[i] != 0;
    inter += p && g;
    np += p;
    ng += g;
  }
  if (np + ng == 0) return 1.0;
  return 2.0 * static_cast<double>(inter) / static_cast<double>(np + ng);
}

// Sensitivity TP/(TP+FN) and specificity TN/(TN+FP). An empty ground truth
// gives sensitivity 1 if the prediction is empty too, else 0; specificity
// of a volume without negatives is 1.
inline std::pair<double, double> sensitivity_specificity(const Grid3<std::uint8_t>& pred,
                                                         const Grid3<std::uint8_t>& gt) {
  detail::require_same_extent(pred, gt, "sensitivity_specificity");
  std::size_t tp = 0, fn = 0, tn = 0, fp = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred.data[i] != 0, g = gt.data[i] != 0;
    tp += p && g;
    fn += !p && g;
    tn += !p && !g;
    fp += p && !g;
  }
  const double sens = tp + fn == 0 ? (fp == 0 ? 1.0 : 0.0) : static_cast<double>(tp) / static_cast<double>(tp + fn);
  const double spec = tn + fp == 0 ? 1.0 : static_cast<double>(tn) / static_cast<double>(tn + fp);
  return {sens, spec};
}

// Foreground voxels with at least one 6-neighbour that is background or
// outside the volume.
inline Grid3<std::uint8_t> surface_voxels(const Grid3<std::uint8_t>& m) {
  Grid3<std::uint8_t> out(m.shape);
  const auto& s = m.shape;
  for (std::int64_t i = 0; i < s[0]; ++i)
    for (std::int64_t j = 0; j < s[1]; ++j)
      for (std::int64_t k = 0; k < s[2]; ++k) {
        if (!m(i, j, k)) continue;
        const bool edge = i == 0 || j == 0 || k == 0 || i == s[0] - 1 || j == s[1] - 1 || k == s[2] - 1;
        out(i, j, k) = edge || !m(i - 1, j, k) || !m(i + 1, j, k) || !m(i, j - 1, k) || !m(i, j + 1, k) ||
                       !m(i, j, k - 1) || !m(i, j, k + 1);
      }
  return out;
}

namespace detail {

// Lower envelope of parabolas f[q] + (w (p - q))^2 along one line
// (Felzenszwalb & Huttenlocher). Infinite entries are not sites.
inline void edt_line(const double* f, double* d, std::int64_t n, double w, std::vector<std::int64_t>& v,
                     std::vector<double>& z) {
  constexpr double inf = std::numeric_limits<double>::infinity();
  v.assign(static_cast<std::size_t>(n), 0);
  z.assign(static_cast<std::size_t>(n) + 1, 0.0);
  std::int64_t k = -1;
  const double w2 = w * w;
  for (std::int64_t q = 0; q < n; ++q) {
    if (f[q] == inf) continue;
    if (k < 0) {
      k = 0;
      v[0] = q;
      z[0] = -inf;
      z[1] = inf;
      continue;
    }
    const double fq = f[q] + w2 * double(q) * double(q);
    double s;
    while (true) {
      const std::int64_t r = v[static_cast<std::size_t>(k)];
      s = (fq - (f[r] + w2 * double(r) * double(r))) / (2.0 * w2 * double(q - r));
      if (s > z[static_cast<std::size_t>(k)]) break;
      --k;  // z[0] is -inf, so k never drops below 0
    }
    ++k;
    v[static_cast<std::size_t>(k)] = q;
    z[static_cast<std::size_t>(k)] = s;
    z[static_cast<std::size_t>(k) + 1] = inf;
  }
  if (k < 0) {
    for (std::int64_t p = 0; p < n; ++p) d[p] = inf;
    return;
  }
  std::int64_t j = 0;
  for (std::int64_t p = 0; p < n; ++p) {
    while (z[static_cast<std::size_t>(j) + 1] < double(p)) ++j;
    const std::int64_t q = v[static_cast<std::size_t>(j)];
    const double dq = w * double(p - q);
    d[p] = f[q] + dq * dq;
  }
}

}  // namespace detail

// Exact squared Euclidean distance (in mm^2) from every voxel to the nearest
// nonzero voxel of `sites`; +inf when there are no sites.
inline std::vector<double> squared_distance_transform(const Grid3<std::uint8_t>& sites,
                                                      const std::array<double, 3>& spacing) {
  constexpr double inf = std::numeric_limits<double>::infinity();
  const auto& s = sites.shape;
  std::vector<double> g(sites.size());
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = sites.data[i] ? 0.0 : inf;
  std::vector<std::int64_t> v;
  std::vector<double> z;
  const std::int64_t stride[3] = {s[1] * s[2], s[2], 1};
  for (int axis = 0; axis < 3; ++axis) {
    const std::int64_t n = s[axis];
    std::vector<double> f(static_cast<std::size_t>(n)), d(static_cast<std::size_t>(n));
    const int a1 = (axis + 1) % 3, a2 = (axis + 2) % 3;
    for (std::int64_t u = 0; u < s[a1]; ++u)
      for (std::int64_t t = 0; t < s[a2]; ++t) {
        const std::int64_t base = u * stride[a1] + t * stride[a2];
        for (std::int64_t p = 0; p < n; ++p) f[p] = g[static_cast<std::size_t>(base + p * stride[axis])];
        detail::edt_line(f.data(), d.data(), n, spacing[axis], v, z);
        for (std::int64_t p = 0; p < n; ++p) g[static_cast<std::size_t>(base + p * stride[axis])] = d[p];
      }
  }
  return g;
}

// Linear-interpolation percentile (q in [0, 100]) of unsorted values.
inline double percentile(std::vector<double> values, double q) {
  if (values.empty()) return 0.0;
  std::sort(values.begin(), values.end());
  const double rank = q / 100.0 * static_cast<double>(values.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(std::floor(rank));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  const double frac = rank - static_cast<double>(lo);
  return values[lo] + frac * (values[hi] - values[lo]);
}

// Surface-to-surface distances of `from` to `to`, one per surface voxel of `from`.
inline std::vector<double> directed_surface_distances(const Grid3<std::uint8_t>& from_surface,
                                                      const Grid3<std::uint8_t>& to_surface,
                                                      const std::array<double, 3>& spacing) {
  const auto dt = squared_distance_transform(to_surface, spacing);
  std::vector<double> out;
  for (std::size_t i = 0; i < from_surface.size(); ++i)
    if (from_surface.data[i]) out.push_back(std::sqrt(dt[i]));
  return out;
}

// 95th percentile of the pooled directed surface distances in both
// directions, in mm.
inline double hd95(const Grid3<std::uint8_t>& pred, const Grid3<std::uint8_t>& gt,
                   const std::array<double, 3>& spacing, const MetricsConfig& cfg = {}) {
  detail::require_same_extent(pred, gt, "hd95");
  const bool pe = std::none_of(pred.data.begin(), pred.data.end(), [](auto v) { return v != 0; });
  const bool ge = std::none_of(gt.data.begin(), gt.data.end(), [](auto v) { return v != 0; });
  if (pe && ge) return 0.0;
  if (pe || ge) return cfg.hd95_sentinel;
  const auto sp = surface_voxels(pred), sg = surface_voxels(gt);
  auto d = directed_surface_distances(sp, sg, spacing);
  const auto back = directed_surface_distances(sg, sp, spacing);
  d.insert(d.end(), back.begin(), back.end());
  return percentile(std::move(d), 95.0);
}

inline CaseMetrics evaluate_case(const RegionMask& pred, const RegionMask& gt, const std::array<double, 3>& spacing,
                                 const MetricsConfig& cfg = {}) {
  CaseMetrics m;
  for (int r = 0; r < 3; ++r) {
    auto& out = m.regions[r];
    out.dice = dice_score(pred.channels[r], gt.channels[r]);
    out.hd95 = hd95(pred.channels[r], gt.channels[r], spacing, cfg);
    std::tie(out.sensitivity, out.specificity) = sensitivity_specificity(pred.channels[r], gt.channels[r]);
  }
  return m;
}

}  // namespace tumorseg
