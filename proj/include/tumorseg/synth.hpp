#pragma once

// Synthetic multimodal cases: an ellipsoidal "brain" on a zero background
// holding nested ellipsoidal tumor compartments (edema 2, core with a
// necrotic centre 1 and an enhancing shell 4). Optional speckles are small
// tumor-like blobs on tumor-free axial slices that carry no label.

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <numbers>
#include <string>
#include <vector>

#include "tumorseg/core/rng.hpp"
#include "tumorseg/data_model.hpp"
#include "tumorseg/io/case_io.hpp"
#include "tumorseg/io/nifti.hpp"

namespace tumorseg {

struct SynthConfig {
  Extent3 shape{64, 64, 64};
  std::array<double, 3> spacing{1.0, 1.0, 1.0};
  std::array<double, 2> tumor_fraction{0.01, 0.10};  // WT voxels / all voxels
  double core_ratio = 0.6;                           // TC radii relative to WT
  double necrosis_ratio = 0.5;                       // necrosis radii relative to TC
  double noise = 0.08;
  int speckles = 0;  // speckle blobs per case
  Extent3 speckle_size{3, 3, 2};
  std::uint64_t seed = 0;

  void validate() const {
    for (auto s : shape)
      if (s < 16) throw ConfigError("synth.shape: every extent must be >= 16");
    for (auto s : spacing)
      if (!(s > 0)) throw ConfigError("synth.spacing: must be > 0");
    if (!(tumor_fraction[0] > 0 && tumor_fraction[0] <= tumor_fraction[1] && tumor_fraction[1] < 0.3))
      throw ConfigError("synth.tumor_fraction: need 0 < lo <= hi < 0.3");
    if (!(core_ratio > 0 && core_ratio < 1)) throw ConfigError("synth.core_ratio: must lie in (0, 1)");
    if (!(necrosis_ratio > 0 && necrosis_ratio < 1)) throw ConfigError("synth.necrosis_ratio: must lie in (0, 1)");
    if (!(noise >= 0)) throw ConfigError("synth.noise: must be >= 0");
    if (speckles < 0) throw ConfigError("synth.speckles: must be >= 0");
    for (auto s : speckle_size)
      if (s < 1) throw ConfigError("synth.speckle_size: components must be >= 1");
  }
};

struct SynthCase {
  std::string id;
  MultimodalVolume image;
  LabelVolume label;
  std::vector<std::int64_t> tumor_free_slices;  // axial indices inside the brain without tumor
  Grid3<std::uint8_t> speckle_mask;             // voxels covered by speckles
};

namespace detail {

struct Ellipsoid {
  std::array<double, 3> c, r;
  double value(double i, double j, double k) const {
    const double a = (i - c[0]) / r[0], b = (j - c[1]) / r[1], d = (k - c[2]) / r[2];
    return a * a + b * b + d * d;
  }
  bool contains(double i, double j, double k) const { return value(i, j, k) <= 1.0; }
};

// Mean intensity per (modality, tissue) with tissues
// 0 brain, 1 edema, 2 necrosis, 3 enhancing. Modalities t1, t1gd, t2, flair.
inline constexpr double kContrast[4][4] = {
    {1.0, 0.7, 0.4, 0.6},  // t1: tumor dark
    {1.0, 1.1, 0.5, 2.6},  // t1gd: enhancing bright
    {1.0, 1.5, 2.2, 2.0},  // t2: core bright
    {1.0, 2.2, 1.8, 2.0},  // flair: whole tumor bright
};

}  // namespace detail

inline std::string synth_case_id(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "synth_%03zu", index);
  return buf;
}

// Case `index` depends only on (cfg.seed, index), not on how many cases are drawn.
inline SynthCase synth_case(const SynthConfig& cfg, std::size_t index) {
  cfg.validate();
  Rng rng(cfg.seed * 0x9E3779B97F4A7C15ull + 0xD1B54A32D192ED03ull * (index + 1));
  const Extent3 s = cfg.shape;
  const double total = static_cast<double>(s[0] * s[1] * s[2]);

  detail::Ellipsoid brain;
  for (int a = 0; a < 3; ++a) {
    brain.c[a] = (s[a] - 1) / 2.0;
    brain.r[a] = 0.45 * s[a];
  }

  // Tumor size from a target fraction; the discretised count is checked
  // against the band and the radii adjusted until it fits.
  const double target = rng.uniform(cfg.tumor_fraction[0], cfg.tumor_fraction[1]);
  std::array<double, 3> aspect{rng.uniform(0.8, 1.2), rng.uniform(0.8, 1.2), rng.uniform(0.8, 1.2)};
  const double unit = 4.0 / 3.0 * std::numbers::pi * aspect[0] * aspect[1] * aspect[2];
  double scale = std::cbrt(target * total / unit);
  std::array<double, 3> offset_u{rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)};

  detail::Ellipsoid wt;
  auto place = [&](double sc) {
    for (int a = 0; a < 3; ++a) {
      wt.r[a] = sc * aspect[a];
      const double room = std::max(0.0, brain.r[a] - wt.r[a] - 2.0);
      wt.c[a] = brain.c[a] + 0.5 * room * offset_u[a];
    }
  };
  auto count_wt = [&]() {
    std::int64_t n = 0;
    for (std::int64_t i = 0; i < s[0]; ++i)
      for (std::int64_t j = 0; j < s[1]; ++j)
        for (std::int64_t k = 0; k < s[2]; ++k) n += wt.contains(i, j, k) && brain.contains(i, j, k);
    return static_cast<double>(n) / total;
  };
  place(scale);
  for (int iter = 0; iter < 40; ++iter) {
    const double f = count_wt();
    if (f >= cfg.tumor_fraction[0] && f <= cfg.tumor_fraction[1]) break;
    scale *= std::cbrt(target / std::max(f, 1e-9));
    place(scale);
  }

  detail::Ellipsoid tc = wt, nec = wt;
  for (int a = 0; a < 3; ++a) {
    tc.r[a] = wt.r[a] * cfg.core_ratio;
    tc.c[a] = wt.c[a] + rng.uniform(-0.3, 0.3) * (wt.r[a] - tc.r[a]);
    nec.r[a] = tc.r[a] * cfg.necrosis_ratio;
    nec.c[a] = tc.c[a];
  }

  Grid3<std::uint8_t> labels(s);
  Grid3<std::uint8_t> tissue(s, 255);  // 255 = outside the brain
  for (std::int64_t i = 0; i < s[0]; ++i)
    for (std::int64_t j = 0; j < s[1]; ++j)
      for (std::int64_t k = 0; k < s[2]; ++k) {
        if (!brain.contains(i, j, k)) continue;
        std::uint8_t t = 0, l = 0;
        if (nec.contains(i, j, k)) {
          t = 2;
          l = 1;
        } else if (tc.contains(i, j, k)) {
          t = 3;
          l = 4;
        } else if (wt.contains(i, j, k)) {
          t = 1;
          l = 2;
        }
        tissue(i, j, k) = t;
        labels(i, j, k) = l;
      }

  SynthCase out;
  out.id = synth_case_id(index);
  out.speckle_mask = Grid3<std::uint8_t>(s);

  // Axial slices (last axis) that cross the brain but not the tumor, with a
  // one-slice margin.
  std::vector<bool> tumor_slice(static_cast<std::size_t>(s[2]), false);
  for (std::size_t v = 0; v < labels.size(); ++v)
    if (labels.data[v]) tumor_slice[v % s[2]] = true;
  for (std::int64_t k = 0; k < s[2]; ++k) {
    bool near = false;
    for (std::int64_t d = -1; d <= 1; ++d)
      if (k + d >= 0 && k + d < s[2] && tumor_slice[k + d]) near = true;
    if (!near && std::abs(k - brain.c[2]) < 0.8 * brain.r[2]) out.tumor_free_slices.push_back(k);
  }

  for (int n = 0; n < cfg.speckles && !out.tumor_free_slices.empty(); ++n) {
    const std::int64_t kz = out.tumor_free_slices[rng.below(out.tumor_free_slices.size())];
    for (int attempt = 0; attempt < 100; ++attempt) {
      const std::int64_t i0 = static_cast<std::int64_t>(rng.below(s[0] - cfg.speckle_size[0]));
      const std::int64_t j0 = static_cast<std::int64_t>(rng.below(s[1] - cfg.speckle_size[1]));
      const std::int64_t k0 = std::clamp<std::int64_t>(kz, 0, s[2] - cfg.speckle_size[2]);
      bool ok = true;
      for (std::int64_t i = i0; i < i0 + cfg.speckle_size[0] && ok; ++i)
        for (std::int64_t j = j0; j < j0 + cfg.speckle_size[1] && ok; ++j)
          for (std::int64_t k = k0; k < k0 + cfg.speckle_size[2] && ok; ++k)
            ok = tissue(i, j, k) == 0 && !tumor_slice[k];
      if (!ok) continue;
      for (std::int64_t i = i0; i < i0 + cfg.speckle_size[0]; ++i)
        for (std::int64_t j = j0; j < j0 + cfg.speckle_size[1]; ++j)
          for (std::int64_t k = k0; k < k0 + cfg.speckle_size[2]; ++k) out.speckle_mask(i, j, k) = 1;
      break;
    }
  }

  std::array<Grid3<float>, 4> mods;
  for (int m = 0; m < 4; ++m) {
    mods[m] = Grid3<float>(s);
    for (std::size_t v = 0; v < labels.size(); ++v) {
      const auto t = tissue.data[v];
      if (t == 255) continue;
      // Speckles copy the enhancing-tissue contrast.
      const double mean = out.speckle_mask.data[v] ? detail::kContrast[m][3] : detail::kContrast[m][t];
      mods[m].data[v] = static_cast<float>(std::max(0.05, mean + cfg.noise * rng.normal()));
    }
  }

  Geometry g;
  g.spacing = cfg.spacing;
  g.axial_axis = 2;
  out.image = MultimodalVolume(std::move(mods), g);
  out.label = LabelVolume(std::move(labels), g);
  return out;
}

inline double tumor_fraction(const LabelVolume& lv) {
  std::size_t n = 0;
  for (auto v : lv.labels().data) n += v != 0;
  return static_cast<double>(n) / static_cast<double>(lv.labels().size());
}

// Writes n cases as <out>/<id>/<id>_{t1,t1gd,t2,flair,seg}.nii.gz plus
// <out>/manifest.json.
inline std::vector<CaseEntry> write_synthetic_dataset(const fs::path& out_dir, std::size_t n, const SynthConfig& cfg) {
  cfg.validate();
  fs::create_directories(out_dir);
  std::vector<CaseEntry> entries;
  for (std::size_t i = 0; i < n; ++i) {
    const SynthCase c = synth_case(cfg, i);
    const fs::path dir = out_dir / c.id;
    fs::create_directories(dir);
    CaseEntry e;
    e.id = c.id;
    for (int m = 0; m < 4; ++m) {
      e.modalities[m] = dir / (c.id + "_" + kModalityNames[m] + ".nii.gz");
      nifti::write(e.modalities[m], c.image.modalities()[m], c.image.geometry());
    }
    e.label = dir / (c.id + "_seg.nii.gz");
    nifti::write(*e.label, c.label.labels(), c.label.geometry());
    entries.push_back(std::move(e));
  }
  write_manifest(out_dir / "manifest.json", entries);
  return entries;
}

}  // namespace tumorseg
