#pragma once

// Volumes, label maps, region masks and the label <-> region mapping.

#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "tumorseg/core/error.hpp"

namespace tumorseg {

using Extent3 = std::array<std::int64_t, 3>;

// Dense 3D grid in C order: index (i, j, k) -> (i * ny + j) * nz + k, with
// the last axis fastest.
template <class T>
struct Grid3 {
  Extent3 shape{0, 0, 0};
  std::vector<T> data;

  Grid3() = default;
  explicit Grid3(Extent3 s, T fill = T{}) : shape(s), data(static_cast<std::size_t>(s[0] * s[1] * s[2]), fill) {}

  std::size_t size() const { return data.size(); }
  std::size_t index(std::int64_t i, std::int64_t j, std::int64_t k) const {
    return static_cast<std::size_t>((i * shape[1] + j) * shape[2] + k);
  }
  T& operator()(std::int64_t i, std::int64_t j, std::int64_t k) { return data[index(i, j, k)]; }
  const T& operator()(std::int64_t i, std::int64_t j, std::int64_t k) const { return data[index(i, j, k)]; }
  bool operator==(const Grid3&) const = default;
};

// Raw NIfTI-1 header bytes kept alongside the geometry so that outputs can
// be written with the input's exact header geometry.
using NiftiHeaderBytes = std::array<std::uint8_t, 348>;

struct Geometry {
  std::array<double, 3> spacing{1.0, 1.0, 1.0};  // mm per axis
  int axial_axis = 2;                             // voxel axis running inferior-superior
  bool has_header = false;
  NiftiHeaderBytes header{};
  bool operator==(const Geometry&) const = default;
};

enum class Modality : int { t1 = 0, t1gd = 1, t2 = 2, flair = 3 };
inline constexpr std::array<const char*, 4> kModalityNames{"t1", "t1gd", "t2", "flair"};

// Four co-registered scalar grids with shared geometry. Validated on construction.
class MultimodalVolume {
 public:
  MultimodalVolume() = default;
  MultimodalVolume(std::array<Grid3<float>, 4> modalities, Geometry geometry)
      : modalities_(std::move(modalities)), geometry_(std::move(geometry)) {
    validate();
  }

  const Grid3<float>& modality(Modality m) const { return modalities_[static_cast<int>(m)]; }
  const std::array<Grid3<float>, 4>& modalities() const { return modalities_; }
  const Extent3& shape() const { return modalities_[0].shape; }
  const Geometry& geometry() const { return geometry_; }

 private:
  void validate() const {
    for (int m = 0; m < 4; ++m) {
      if (modalities_[m].shape != modalities_[0].shape)
        throw GeometryMismatch(std::string("modality ") + kModalityNames[m] + " shape differs from t1");
      const auto& s = modalities_[m].shape;
      if (modalities_[m].data.size() != static_cast<std::size_t>(s[0] * s[1] * s[2]))
        throw InvalidVolume("modality storage does not match its shape");
      for (float v : modalities_[m].data)
        if (!std::isfinite(v)) throw InvalidVolume(std::string("non-finite value in ") + kModalityNames[m]);
    }
    for (double s : geometry_.spacing)
      if (!(s > 0)) throw InvalidVolume("spacing components must be strictly positive");
    if (geometry_.axial_axis < 0 || geometry_.axial_axis > 2) throw InvalidVolume("axial axis must be 0, 1 or 2");
  }

  std::array<Grid3<float>, 4> modalities_;
  Geometry geometry_;
};

// Labels 0 (background), 1 (necrotic / non-enhancing core), 2 (edema), 4 (enhancing).
class LabelVolume {
 public:
  LabelVolume() = default;
  LabelVolume(Grid3<std::uint8_t> labels, Geometry geometry)
      : labels_(std::move(labels)), geometry_(std::move(geometry)) {
    for (auto v : labels_.data)
      if (!is_valid_label(v)) throw InvalidLabel("label value " + std::to_string(int(v)) + " not in {0,1,2,4}");
  }

  static bool is_valid_label(int v) { return v == 0 || v == 1 || v == 2 || v == 4; }

  const Grid3<std::uint8_t>& labels() const { return labels_; }
  const Extent3& shape() const { return labels_.shape; }
  const Geometry& geometry() const { return geometry_; }
  bool operator==(const LabelVolume& o) const { return labels_ == o.labels_; }

 private:
  Grid3<std::uint8_t> labels_;
  Geometry geometry_;
};

enum class Region : int { wt = 0, tc = 1, et = 2 };
inline constexpr std::array<const char*, 3> kRegionNames{"WT", "TC", "ET"};

// Three binary channels ordered (WT, TC, ET).
struct RegionMask {
  std::array<Grid3<std::uint8_t>, 3> channels;

  RegionMask() = default;
  explicit RegionMask(Extent3 shape) : channels{Grid3<std::uint8_t>(shape), Grid3<std::uint8_t>(shape), Grid3<std::uint8_t>(shape)} {}

  const Extent3& shape() const { return channels[0].shape; }
  Grid3<std::uint8_t>& operator[](Region r) { return channels[static_cast<int>(r)]; }
  const Grid3<std::uint8_t>& operator[](Region r) const { return channels[static_cast<int>(r)]; }
  std::size_t count(Region r) const {
    std::size_t n = 0;
    for (auto v : (*this)[r].data) n += v != 0;
    return n;
  }
  bool operator==(const RegionMask&) const = default;

  // ET subset of TC subset of WT, voxelwise.
  bool is_nested() const {
    for (std::size_t i = 0; i < channels[0].size(); ++i) {
      if (channels[2].data[i] && !channels[1].data[i]) return false;
      if (channels[1].data[i] && !channels[0].data[i]) return false;
    }
    return true;
  }
};

// Inclusive voxel bounds per axis.
struct CropBox {
  Extent3 lo{0, 0, 0};
  Extent3 hi{0, 0, 0};
  Extent3 extent() const { return {hi[0] - lo[0] + 1, hi[1] - lo[1] + 1, hi[2] - lo[2] + 1}; }
  bool operator==(const CropBox&) const = default;
};

// WT = {1, 2, 4}, TC = {1, 4}, ET = {4}.
inline RegionMask labels_to_regions(const LabelVolume& lv) {
  RegionMask m(lv.shape());
  const auto& src = lv.labels().data;
  for (std::size_t i = 0; i < src.size(); ++i) {
    const auto v = src[i];
    m.channels[0].data[i] = v != 0;
    m.channels[1].data[i] = v == 1 || v == 4;
    m.channels[2].data[i] = v == 4;
  }
  return m;
}

// Priority ET > TC > WT, so non-nested masks still give one label per voxel.
inline LabelVolume regions_to_labels(const RegionMask& rm, Geometry geometry = {}) {
  Grid3<std::uint8_t> out(rm.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (rm.channels[2].data[i])
      out.data[i] = 4;
    else if (rm.channels[1].data[i])
      out.data[i] = 1;
    else if (rm.channels[0].data[i])
      out.data[i] = 2;
  }
  return LabelVolume(std::move(out), std::move(geometry));
}

}  // namespace tumorseg
