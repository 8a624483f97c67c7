#pragma once

// Full-volume prediction: flip TTA and model ensembling, thresholding,
// slice-level gating, sliding-window tiling and restoration to the input
// geometry.

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <map>
#include <memory>
#include <vector>

#include "tumorseg/nn/network.hpp"
#include "tumorseg/preprocess.hpp"

namespace tumorseg {

enum class AverageSpace { logits, probs };
enum class Tiling { full, sliding };

inline std::string to_string(AverageSpace s) { return s == AverageSpace::logits ? "logits" : "probs"; }
inline std::string to_string(Tiling t) { return t == Tiling::full ? "full" : "sliding"; }

inline AverageSpace parse_average_space(const std::string& s) {
  if (s == "logits") return AverageSpace::logits;
  if (s == "probs") return AverageSpace::probs;
  throw ConfigError("inference.average_space: expected logits|probs, got '" + s + "'");
}

inline Tiling parse_tiling(const std::string& s) {
  if (s == "full") return Tiling::full;
  if (s == "sliding") return Tiling::sliding;
  throw ConfigError("inference.tiling: expected full|sliding, got '" + s + "'");
}

using FlipSet = std::array<bool, 3>;

inline std::vector<FlipSet> all_flip_sets() {
  std::vector<FlipSet> out;
  for (int m = 0; m < 8; ++m) out.push_back({bool(m & 1), bool(m & 2), bool(m & 4)});
  return out;
}

struct InferenceConfig {
  std::vector<FlipSet> tta_flips = all_flip_sets();
  double threshold = 0.5;
  bool gate_enabled = true;
  AverageSpace average_space = AverageSpace::logits;
  Tiling tiling = Tiling::full;
  Extent3 window{128, 128, 96};  // sliding-window tile, multiples of the network size multiple
  double overlap = 0.5;
  std::int64_t min_component_voxels = 0;  // > 0 enables the small-component removal baseline
  bool write_probabilities = false;

  void validate() const {
    if (!(threshold > 0 && threshold < 1)) throw ConfigError("inference.threshold: must lie in (0, 1)");
    if (std::find(tta_flips.begin(), tta_flips.end(), FlipSet{false, false, false}) == tta_flips.end())
      throw ConfigError("inference.tta_flips: the identity flip must be included");
    if (!(overlap >= 0 && overlap < 1)) throw ConfigError("inference.overlap: must lie in [0, 1)");
    for (auto w : window)
      if (w <= 0) throw ConfigError("inference.window: components must be positive");
    if (min_component_voxels < 0) throw ConfigError("inference.min_component_voxels: must be >= 0");
  }
};

// Raw model outputs for one volume: seg (1, 3, X, Y, Z), slices (1, 3, Z).
template <class T>
struct ModelOutput {
  Tensor<T> seg;
  Tensor<T> slices;
};

template <class T>
using Predictor = std::function<ModelOutput<T>(const Tensor<T>& image)>;

// Evaluation-mode forward of a network, without graph recording.
template <class T>
Predictor<T> as_predictor(nn::SegmentationNet<T>& net) {
  return [&net](const Tensor<T>& image) {
    net.set_training(false);
    NoGradGuard guard;
    auto out = net.forward(Var<T>(image));
    return ModelOutput<T>{out.seg_logits.value(), out.slice_logits.value()};
  };
}

// Reverses the spatial axes of an (N, C, X, Y, Z) tensor selected by `f`.
template <class T>
Tensor<T> flip_spatial(const Tensor<T>& t, const FlipSet& f) {
  if (!f[0] && !f[1] && !f[2]) return t;
  const auto d = dims5(t.shape());
  Tensor<T> out(t.shape());
  for (std::int64_t nc = 0; nc < d.n * d.c; ++nc) {
    const T* src = t.data() + nc * d.spatial();
    T* dst = out.data() + nc * d.spatial();
    for (std::int64_t i = 0; i < d.x; ++i)
      for (std::int64_t j = 0; j < d.y; ++j)
        for (std::int64_t k = 0; k < d.z; ++k) {
          const std::int64_t ii = f[0] ? d.x - 1 - i : i, jj = f[1] ? d.y - 1 - j : j, kk = f[2] ? d.z - 1 - k : k;
          dst[(ii * d.y + jj) * d.z + kk] = src[(i * d.y + j) * d.z + k];
        }
  }
  return out;
}

// Reverses the last axis of an (N, C, Z) tensor.
template <class T>
Tensor<T> flip_sequence(const Tensor<T>& t) {
  const std::int64_t z = t.dim(2), rows = t.dim(0) * t.dim(1);
  Tensor<T> out(t.shape());
  for (std::int64_t r = 0; r < rows; ++r)
    for (std::int64_t k = 0; k < z; ++k) out[r * z + (z - 1 - k)] = t[r * z + k];
  return out;
}

template <class T>
T logit_of(double p) {
  p = std::clamp(p, 1e-7, 1.0 - 1e-7);
  return static_cast<T>(std::log(p / (1.0 - p)));
}

// Joint arithmetic mean over every (model, flip) pair, in logit space or in
// probability space (converted back to logits).
template <class T>
ModelOutput<T> tta_ensemble_logits(const std::vector<Predictor<T>>& models, const Tensor<T>& image,
                                   const InferenceConfig& cfg) {
  if (models.empty()) throw ConfigError("inference: no ensemble members");
  if (cfg.tta_flips.empty()) throw ConfigError("inference.tta_flips: empty");
  std::vector<double> seg_acc, slice_acc;
  Shape seg_shape, slice_shape;
  std::size_t count = 0;
  for (const auto& model : models)
    for (const auto& f : cfg.tta_flips) {
      auto out = model(flip_spatial(image, f));
      Tensor<T> seg = flip_spatial(out.seg, f);
      Tensor<T> slices = f[2] ? flip_sequence(out.slices) : out.slices;
      if (count == 0) {
        seg_shape = seg.shape();
        slice_shape = slices.shape();
        seg_acc.assign(seg.numel(), 0.0);
        slice_acc.assign(slices.numel(), 0.0);
      } else if (seg.shape() != seg_shape || slices.shape() != slice_shape) {
        throw ShapeError("inference: ensemble members disagree on output shape");
      }
      auto add = [&](std::vector<double>& acc, const Tensor<T>& v) {
        for (std::size_t i = 0; i < acc.size(); ++i)
          acc[i] += cfg.average_space == AverageSpace::logits ? double(v[i]) : 1.0 / (1.0 + std::exp(-double(v[i])));
      };
      add(seg_acc, seg);
      add(slice_acc, slices);
      ++count;
    }
  auto finish = [&](const std::vector<double>& acc, const Shape& s) {
    Tensor<T> t(s);
    for (std::size_t i = 0; i < acc.size(); ++i) {
      const double mean = acc[i] / static_cast<double>(count);
      t[i] = cfg.average_space == AverageSpace::logits ? static_cast<T>(mean) : logit_of<T>(mean);
    }
    return t;
  };
  return {finish(seg_acc, seg_shape), finish(slice_acc, slice_shape)};
}

// Slice-level gate decisions: keep[r][z] is true when region r is kept on axial slice z.
using GateDecisions = std::array<std::vector<bool>, 3>;

struct GatedMask {
  RegionMask mask;
  GateDecisions keep;
  std::array<std::vector<double>, 3> slice_probs;
};

// Sigmoid + threshold on both outputs; with gating, regions on slices whose
// slice probability falls below the threshold are cleared.
template <class T>
GatedMask threshold_and_gate(const Tensor<T>& seg_logits, const Tensor<T>& slice_logits, const InferenceConfig& cfg) {
  const auto d = dims5(seg_logits.shape());
  if (d.n != 1 || d.c != 3) throw ShapeError("threshold_and_gate: expected (1, 3, X, Y, Z) logits");
  if (slice_logits.shape() != Shape{1, 3, d.z}) throw ShapeError("threshold_and_gate: slice logits must be (1, 3, Z)");
  GatedMask out;
  out.mask = RegionMask({d.x, d.y, d.z});
  for (int r = 0; r < 3; ++r) {
    out.keep[r].assign(static_cast<std::size_t>(d.z), true);
    out.slice_probs[r].resize(static_cast<std::size_t>(d.z));
    for (std::int64_t k = 0; k < d.z; ++k) {
      const double p = 1.0 / (1.0 + std::exp(-double(slice_logits[r * d.z + k])));
      out.slice_probs[r][k] = p;
      if (cfg.gate_enabled && p < cfg.threshold) out.keep[r][k] = false;
    }
    const T* src = seg_logits.data() + r * d.spatial();
    auto& dst = out.mask.channels[r].data;
    for (std::int64_t p = 0; p < d.x * d.y; ++p)
      for (std::int64_t k = 0; k < d.z; ++k) {
        const std::size_t i = static_cast<std::size_t>(p * d.z + k);
        const double prob = 1.0 / (1.0 + std::exp(-double(src[i])));
        dst[i] = prob >= cfg.threshold && out.keep[r][k];
      }
  }
  return out;
}

// Removes 6-connected components smaller than `min_voxels` (baseline only).
inline Grid3<std::uint8_t> remove_small_components(const Grid3<std::uint8_t>& m, std::int64_t min_voxels) {
  Grid3<std::uint8_t> out = m;
  if (min_voxels <= 1) return out;
  const auto& s = m.shape;
  std::vector<std::int32_t> label(m.size(), -1);
  std::vector<std::size_t> stack, members;
  for (std::size_t start = 0; start < m.size(); ++start) {
    if (!m.data[start] || label[start] >= 0) continue;
    members.clear();
    stack.assign(1, start);
    label[start] = 1;
    while (!stack.empty()) {
      const std::size_t v = stack.back();
      stack.pop_back();
      members.push_back(v);
      const std::int64_t k = static_cast<std::int64_t>(v) % s[2];
      const std::int64_t j = (static_cast<std::int64_t>(v) / s[2]) % s[1];
      const std::int64_t i = static_cast<std::int64_t>(v) / (s[1] * s[2]);
      const std::int64_t nb[6][3] = {{i - 1, j, k}, {i + 1, j, k}, {i, j - 1, k}, {i, j + 1, k}, {i, j, k - 1}, {i, j, k + 1}};
      for (const auto& n : nb) {
        if (n[0] < 0 || n[1] < 0 || n[2] < 0 || n[0] >= s[0] || n[1] >= s[1] || n[2] >= s[2]) continue;
        const std::size_t u = m.index(n[0], n[1], n[2]);
        if (m.data[u] && label[u] < 0) {
          label[u] = 1;
          stack.push_back(u);
        }
      }
    }
    if (static_cast<std::int64_t>(members.size()) < min_voxels)
      for (auto v : members) out.data[v] = 0;
  }
  return out;
}

// Start offsets of windows of length w with the given overlap covering n.
inline std::vector<std::int64_t> window_starts(std::int64_t n, std::int64_t w, double overlap) {
  if (w >= n) return {0};
  const std::int64_t step = std::max<std::int64_t>(1, static_cast<std::int64_t>(std::floor(w * (1.0 - overlap))));
  std::vector<std::int64_t> out;
  for (std::int64_t s = 0;; s += step) {
    if (s + w >= n) {
      out.push_back(n - w);
      break;
    }
    out.push_back(s);
  }
  return out;
}

template <class T>
Tensor<T> crop_tensor(const Tensor<T>& t, const Extent3& lo, const Extent3& ext) {
  const auto d = dims5(t.shape());
  Tensor<T> out({d.n, d.c, ext[0], ext[1], ext[2]});
  for (std::int64_t nc = 0; nc < d.n * d.c; ++nc)
    for (std::int64_t i = 0; i < ext[0]; ++i)
      for (std::int64_t j = 0; j < ext[1]; ++j)
        std::copy_n(t.data() + nc * d.spatial() + ((lo[0] + i) * d.y + lo[1] + j) * d.z + lo[2], ext[2],
                    out.data() + ((nc * ext[0] + i) * ext[1] + j) * ext[2]);
  return out;
}

// Uniformly averaged tiles; slice outputs are averaged over the tiles
// covering each axial position.
template <class T>
Predictor<T> sliding_window(Predictor<T> inner, Extent3 window, double overlap) {
  return [inner = std::move(inner), window, overlap](const Tensor<T>& image) {
    const auto d = dims5(image.shape());
    const Extent3 full{d.x, d.y, d.z};
    Extent3 w;
    for (int a = 0; a < 3; ++a) w[a] = std::min(window[a], full[a]);
    std::vector<double> seg(static_cast<std::size_t>(3 * d.spatial()), 0.0), seg_n(static_cast<std::size_t>(d.spatial()), 0.0);
    std::vector<double> sl(static_cast<std::size_t>(3 * d.z), 0.0), sl_n(static_cast<std::size_t>(d.z), 0.0);
    for (auto x0 : window_starts(d.x, w[0], overlap))
      for (auto y0 : window_starts(d.y, w[1], overlap))
        for (auto z0 : window_starts(d.z, w[2], overlap)) {
          auto out = inner(crop_tensor(image, {x0, y0, z0}, w));
          for (int c = 0; c < 3; ++c)
            for (std::int64_t i = 0; i < w[0]; ++i)
              for (std::int64_t j = 0; j < w[1]; ++j)
                for (std::int64_t k = 0; k < w[2]; ++k) {
                  const std::size_t dst = static_cast<std::size_t>(((x0 + i) * d.y + y0 + j) * d.z + z0 + k);
                  seg[c * d.spatial() + dst] += out.seg[((c * w[0] + i) * w[1] + j) * w[2] + k];
                  if (c == 0) seg_n[dst] += 1;
                }
          for (int c = 0; c < 3; ++c)
            for (std::int64_t k = 0; k < w[2]; ++k) {
              sl[c * d.z + z0 + k] += out.slices[c * w[2] + k];
              if (c == 0) sl_n[z0 + k] += 1;
            }
        }
    ModelOutput<T> res{Tensor<T>({1, 3, d.x, d.y, d.z}), Tensor<T>({1, 3, d.z})};
    for (int c = 0; c < 3; ++c) {
      for (std::int64_t v = 0; v < d.spatial(); ++v) res.seg[c * d.spatial() + v] = static_cast<T>(seg[c * d.spatial() + v] / seg_n[v]);
      for (std::int64_t k = 0; k < d.z; ++k) res.slices[c * d.z + k] = static_cast<T>(sl[c * d.z + k] / sl_n[k]);
    }
    return res;
  };
}

// Geometry bookkeeping between the input volume and the network frame:
// foreground crop, axial-last permutation, padding to the size multiple.
struct CaseFrame {
  Extent3 original{0, 0, 0};
  CropBox crop;
  std::array<int, 3> perm{0, 1, 2};
  Padding pad;

  template <class V>
  Grid3<V> to_network(const Grid3<V>& g) const {
    return pad_grid(permute_grid(crop_grid(g, crop), perm), pad);
  }
  template <class V>
  Grid3<V> to_original(const Grid3<V>& g) const {
    return uncrop_grid(permute_grid(unpad_grid(g, pad), inverse_permutation(perm)), crop, original);
  }
};

inline CaseFrame make_case_frame(const MultimodalVolume& v, std::int64_t size_multiple, std::int64_t min_extent = 1) {
  CaseFrame f;
  f.original = v.shape();
  f.crop = compute_foreground_crop(v);
  f.perm = axial_last_permutation(v.geometry().axial_axis);
  const Extent3 e = f.crop.extent();
  Extent3 permuted{e[f.perm[0]], e[f.perm[1]], e[f.perm[2]]};
  for (auto& x : permuted) x = std::max(x, min_extent);
  Extent3 target;
  for (int a = 0; a < 3; ++a) target[a] = (permuted[a] + size_multiple - 1) / size_multiple * size_multiple;
  f.pad = symmetric_padding_to({e[f.perm[0]], e[f.perm[1]], e[f.perm[2]]}, target);
  return f;
}

// Network-frame image: cropped, normalized, axial axis last, padded.
inline MultimodalVolume to_network_frame(const MultimodalVolume& v, const CaseFrame& f) {
  const MultimodalVolume norm = normalize(crop(v, f.crop));
  std::array<Grid3<float>, 4> out;
  for (int m = 0; m < 4; ++m) out[m] = pad_grid(permute_grid(norm.modalities()[m], f.perm), f.pad);
  Geometry g = v.geometry();
  g.axial_axis = 2;
  return MultimodalVolume(std::move(out), g);
}

struct CasePrediction {
  LabelVolume labels;                      // original geometry
  RegionMask regions;                      // original geometry
  RegionMask ungated_regions;              // original geometry, before gating
  std::array<Grid3<float>, 3> probabilities;  // original geometry, filled when requested
  GatedMask network_frame;                 // gate decisions in the network frame
  CaseFrame frame;
};

template <class T>
CasePrediction predict_case(const MultimodalVolume& image, const std::vector<Predictor<T>>& models,
                            const InferenceConfig& cfg, std::int64_t size_multiple) {
  cfg.validate();
  CasePrediction out;
  out.frame = make_case_frame(image, size_multiple, 2);
  const MultimodalVolume net_image = to_network_frame(image, out.frame);
  std::vector<Predictor<T>> members = models;
  if (cfg.tiling == Tiling::sliding)
    for (auto& m : members) m = sliding_window<T>(m, cfg.window, cfg.overlap);
  const auto logits = tta_ensemble_logits<T>(members, to_tensor<T>(net_image), cfg);

  out.network_frame = threshold_and_gate(logits.seg, logits.slices, cfg);
  InferenceConfig ungated = cfg;
  ungated.gate_enabled = false;
  auto raw = threshold_and_gate(logits.seg, logits.slices, ungated).mask;
  if (cfg.min_component_voxels > 0)
    for (int r = 0; r < 3; ++r) {
      out.network_frame.mask.channels[r] = remove_small_components(out.network_frame.mask.channels[r], cfg.min_component_voxels);
      raw.channels[r] = remove_small_components(raw.channels[r], cfg.min_component_voxels);
    }
  out.regions = RegionMask(image.shape());
  out.ungated_regions = RegionMask(image.shape());
  for (int r = 0; r < 3; ++r) {
    out.regions.channels[r] = out.frame.to_original(out.network_frame.mask.channels[r]);
    out.ungated_regions.channels[r] = out.frame.to_original(raw.channels[r]);
  }
  if (cfg.write_probabilities) {
    const auto d = dims5(logits.seg.shape());
    for (int r = 0; r < 3; ++r) {
      Grid3<float> p({d.x, d.y, d.z});
      for (std::size_t i = 0; i < p.size(); ++i)
        p.data[i] = static_cast<float>(1.0 / (1.0 + std::exp(-double(logits.seg[r * d.spatial() + i]))));
      out.probabilities[r] = out.frame.to_original(p);
    }
  }
  out.labels = regions_to_labels(out.regions, image.geometry());
  return out;
}

}  // namespace tumorseg
