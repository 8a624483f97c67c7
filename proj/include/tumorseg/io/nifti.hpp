#pragma once

// NIfTI-1 single-file reader/writer (.nii and .nii.gz through zlib).
// On disk the first axis varies fastest; in memory Grid3 stores the last
// axis fastest, so data is transposed on the way in and out.

#include <zlib.h>

#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <type_traits>
#include <vector>

#include "tumorseg/data_model.hpp"

namespace tumorseg::nifti {

namespace dt {
inline constexpr std::int16_t uint8 = 2, int16 = 4, int32 = 8, float32 = 16, float64 = 64, int8 = 256,
                              uint16 = 512, uint32 = 768, int64 = 1024, uint64 = 1280;
}

namespace off {
inline constexpr int sizeof_hdr = 0, dim = 40, datatype = 70, bitpix = 72, pixdim = 76, vox_offset = 108,
                     scl_slope = 112, scl_inter = 116, qform_code = 252, sform_code = 254, quatern_b = 256,
                     srow_x = 280, magic = 344;
}

namespace detail {

inline void byteswap(void* p, std::size_t n) {
  auto* b = static_cast<std::uint8_t*>(p);
  for (std::size_t i = 0; i < n / 2; ++i) std::swap(b[i], b[n - 1 - i]);
}

class Header {
 public:
  Header() { bytes_.fill(0); }
  explicit Header(const NiftiHeaderBytes& b) : bytes_(b) {
    std::int32_t sz;
    std::memcpy(&sz, bytes_.data(), 4);
    if (sz == 348) return;
    byteswap(&sz, 4);
    if (sz != 348) throw NiftiError("sizeof_hdr is not 348; not a NIfTI-1 file");
    swapped_ = true;
  }

  template <class V>
  V get(int offset) const {
    V v;
    std::memcpy(&v, bytes_.data() + offset, sizeof(V));
    if (swapped_) byteswap(&v, sizeof(V));
    return v;
  }
  template <class V>
  void set(int offset, V v) {
    if (swapped_) byteswap(&v, sizeof(V));
    std::memcpy(bytes_.data() + offset, &v, sizeof(V));
  }

  // Native-endian copy, so that later writes need no swapping.
  NiftiHeaderBytes native() const {
    if (!swapped_) return bytes_;
    Header h;
    std::memcpy(h.bytes_.data(), bytes_.data(), 348);
    auto fix = [&](int o, int size) { byteswap(h.bytes_.data() + o, size); };
    fix(0, 4);
    fix(32, 4);                              // extents
    fix(36, 2);                              // session_error
    for (int i = 0; i < 8; ++i) fix(40 + 2 * i, 2);
    for (int i = 0; i < 3; ++i) fix(56 + 4 * i, 4);  // intent_p1..3
    for (int o : {68, 70, 72, 74}) fix(o, 2);
    for (int i = 0; i < 8; ++i) fix(76 + 4 * i, 4);
    for (int o : {108, 112, 116}) fix(o, 4);
    fix(120, 2);
    for (int o : {124, 128, 132, 136, 140, 144}) fix(o, 4);
    for (int o : {252, 254}) fix(o, 2);
    for (int i = 0; i < 18; ++i) fix(256 + 4 * i, 4);
    return h.bytes_;
  }

  const NiftiHeaderBytes& bytes() const { return bytes_; }
  bool swapped() const { return swapped_; }
  void set_magic() { std::memcpy(bytes_.data() + off::magic, "n+1\0", 4); }

 private:
  NiftiHeaderBytes bytes_;
  bool swapped_ = false;
};

struct GzFile {
  gzFile f = nullptr;
  GzFile(const std::filesystem::path& p, const char* mode) : f(gzopen(p.string().c_str(), mode)) {}
  ~GzFile() {
    if (f) gzclose(f);
  }
  GzFile(const GzFile&) = delete;
  GzFile& operator=(const GzFile&) = delete;
  void read(void* dst, std::size_t n, const std::string& what) {
    auto* p = static_cast<char*>(dst);
    while (n > 0) {
      const unsigned chunk = static_cast<unsigned>(std::min<std::size_t>(n, 1u << 30));
      const int got = gzread(f, p, chunk);
      if (got <= 0) throw NiftiError("truncated file while reading " + what);
      p += got;
      n -= static_cast<std::size_t>(got);
    }
  }
  void write(const void* src, std::size_t n) {
    const auto* p = static_cast<const char*>(src);
    while (n > 0) {
      const unsigned chunk = static_cast<unsigned>(std::min<std::size_t>(n, 1u << 30));
      const int put = gzwrite(f, p, chunk);
      if (put <= 0) throw NiftiError("write failed");
      p += put;
      n -= static_cast<std::size_t>(put);
    }
  }
};

inline bool is_gz(const std::filesystem::path& p) { return p.extension() == ".gz"; }

// 3x3 direction/scale matrix of the voxel->world mapping.
inline std::array<std::array<double, 3>, 3> direction_matrix(const Header& h) {
  std::array<std::array<double, 3>, 3> m{};
  if (h.get<std::int16_t>(off::sform_code) > 0) {
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) m[r][c] = h.get<float>(off::srow_x + 16 * r + 4 * c);
    return m;
  }
  if (h.get<std::int16_t>(off::qform_code) > 0) {
    const double b = h.get<float>(off::quatern_b), c = h.get<float>(off::quatern_b + 4),
                 d = h.get<float>(off::quatern_b + 8);
    const double a = std::sqrt(std::max(0.0, 1.0 - (b * b + c * c + d * d)));
    const double qfac = h.get<float>(off::pixdim) < 0 ? -1.0 : 1.0;
    const double R[3][3] = {{a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)},
                            {2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)},
                            {2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - c * c - b * b}};
    for (int r = 0; r < 3; ++r)
      for (int col = 0; col < 3; ++col) m[r][col] = R[r][col] * (col == 2 ? qfac : 1.0);
    return m;
  }
  for (int i = 0; i < 3; ++i) m[i][i] = 1.0;
  return m;
}

// The axial axis is the voxel axis with the largest world-z component.
inline int axial_axis(const Header& h) {
  const auto m = direction_matrix(h);
  int best = 2;
  double best_v = -1;
  for (int c = 0; c < 3; ++c) {
    const double norm = std::sqrt(m[0][c] * m[0][c] + m[1][c] * m[1][c] + m[2][c] * m[2][c]);
    const double v = norm > 0 ? std::fabs(m[2][c]) / norm : 0.0;
    if (v > best_v + 1e-9) {
      best_v = v;
      best = c;
    }
  }
  return best;
}

template <class Out, class In>
void convert(const std::vector<std::uint8_t>& raw, bool swap, double slope, double inter, std::vector<Out>& out) {
  const std::size_t n = raw.size() / sizeof(In);
  out.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    In v;
    std::memcpy(&v, raw.data() + i * sizeof(In), sizeof(In));
    if (swap) byteswap(&v, sizeof(In));
    out[i] = static_cast<Out>(static_cast<double>(v) * slope + inter);
  }
}

}  // namespace detail

template <class T>
struct Image {
  Grid3<T> grid;
  Geometry geometry;
};

template <class T>
struct Volumes {
  std::vector<Grid3<T>> grids;  // one per index of the fourth axis
  Geometry geometry;
};

// Reads a 3D or 4D NIfTI-1 image, applying scl_slope/scl_inter when slope is
// nonzero. Dimensions beyond the fourth must have extent 1.
template <class T>
Volumes<T> read_volumes(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw NiftiError("no such file: " + path.string());
  detail::GzFile file(path, "rb");
  if (!file.f) throw NiftiError("cannot open " + path.string());
  NiftiHeaderBytes raw{};
  file.read(raw.data(), raw.size(), path.string() + " header");
  detail::Header h(raw);
  const bool swapped = h.swapped();
  const char* magic = reinterpret_cast<const char*>(raw.data() + off::magic);
  if (std::strncmp(magic, "n+1", 3) != 0)
    throw NiftiError(path.string() + ": only single-file NIfTI-1 (magic n+1) is supported");

  const int ndim = h.get<std::int16_t>(off::dim);
  if (ndim < 1 || ndim > 7) throw NiftiError(path.string() + ": invalid dim[0]");
  Extent3 ext{1, 1, 1};
  std::int64_t count = 1;
  for (int i = 0; i < ndim; ++i) {
    const std::int64_t e = h.get<std::int16_t>(off::dim + 2 * (i + 1));
    if (e < 1) throw NiftiError(path.string() + ": nonpositive extent");
    if (i < 3)
      ext[i] = e;
    else if (i == 3)
      count = e;
    else if (e != 1)
      throw NiftiError(path.string() + ": images beyond 4D are not supported");
  }
  const std::int16_t type = h.get<std::int16_t>(off::datatype);
  std::size_t bytes_per = 0;
  switch (type) {
    case dt::uint8: case dt::int8: bytes_per = 1; break;
    case dt::int16: case dt::uint16: bytes_per = 2; break;
    case dt::int32: case dt::uint32: case dt::float32: bytes_per = 4; break;
    case dt::float64: case dt::int64: case dt::uint64: bytes_per = 8; break;
    default: throw NiftiError(path.string() + ": unsupported datatype " + std::to_string(type));
  }

  const double vox_offset = h.get<float>(off::vox_offset);
  const std::int64_t skip = static_cast<std::int64_t>(vox_offset) - 348;
  if (skip < 0) throw NiftiError(path.string() + ": vox_offset < 348");
  std::vector<std::uint8_t> ignored(static_cast<std::size_t>(skip));
  if (skip > 0) file.read(ignored.data(), ignored.size(), path.string() + " extensions");

  const std::size_t n = static_cast<std::size_t>(ext[0] * ext[1] * ext[2] * count);
  std::vector<std::uint8_t> raw_data(n * bytes_per);
  file.read(raw_data.data(), raw_data.size(), path.string() + " voxel data");

  double slope = h.get<float>(off::scl_slope), inter = h.get<float>(off::scl_inter);
  if (slope == 0.0 || !std::isfinite(slope)) {
    slope = 1.0;
    inter = 0.0;
  }
  if (!std::isfinite(inter)) inter = 0.0;

  std::vector<double> fortran;
  switch (type) {
    case dt::uint8: detail::convert<double, std::uint8_t>(raw_data, swapped, slope, inter, fortran); break;
    case dt::int8: detail::convert<double, std::int8_t>(raw_data, swapped, slope, inter, fortran); break;
    case dt::int16: detail::convert<double, std::int16_t>(raw_data, swapped, slope, inter, fortran); break;
    case dt::uint16: detail::convert<double, std::uint16_t>(raw_data, swapped, slope, inter, fortran); break;
    case dt::int32: detail::convert<double, std::int32_t>(raw_data, swapped, slope, inter, fortran); break;
    case dt::uint32: detail::convert<double, std::uint32_t>(raw_data, swapped, slope, inter, fortran); break;
    case dt::int64: detail::convert<double, std::int64_t>(raw_data, swapped, slope, inter, fortran); break;
    case dt::uint64: detail::convert<double, std::uint64_t>(raw_data, swapped, slope, inter, fortran); break;
    case dt::float32: detail::convert<double, float>(raw_data, swapped, slope, inter, fortran); break;
    case dt::float64: detail::convert<double, double>(raw_data, swapped, slope, inter, fortran); break;
  }

  Volumes<T> img;
  const std::size_t per = n / static_cast<std::size_t>(count);
  for (std::int64_t c = 0; c < count; ++c) {
    Grid3<T> g(ext);
    const double* src = fortran.data() + static_cast<std::size_t>(c) * per;
    for (std::int64_t k = 0; k < ext[2]; ++k)
      for (std::int64_t j = 0; j < ext[1]; ++j)
        for (std::int64_t i = 0; i < ext[0]; ++i) {
          const double v = src[static_cast<std::size_t>((k * ext[1] + j) * ext[0] + i)];
          if constexpr (std::is_integral_v<T>)
            g(i, j, k) = static_cast<T>(std::lround(v));
          else
            g(i, j, k) = static_cast<T>(v);
        }
    img.grids.push_back(std::move(g));
  }

  for (int a = 0; a < 3; ++a) {
    const double s = std::fabs(h.get<float>(off::pixdim + 4 * (a + 1)));
    img.geometry.spacing[a] = s > 0 ? s : 1.0;
  }
  img.geometry.axial_axis = detail::axial_axis(h);
  img.geometry.has_header = true;
  img.geometry.header = h.native();
  return img;
}

// Reads a 3D volume; a fourth dimension of extent 1 is accepted.
template <class T>
Image<T> read(const std::filesystem::path& path) {
  auto v = read_volumes<T>(path);
  if (v.grids.size() != 1) throw NiftiError(path.string() + ": only 3D volumes are supported");
  return {std::move(v.grids[0]), std::move(v.geometry)};
}

// Fresh header for a volume with the given geometry: identity orientation
// scaled by spacing, sform_code 1.
inline NiftiHeaderBytes make_header(const Extent3& ext, const Geometry& g) {
  detail::Header h;
  h.set<std::int32_t>(off::sizeof_hdr, 348);
  h.set<std::int16_t>(off::dim, 3);
  for (int i = 0; i < 3; ++i) h.set<std::int16_t>(off::dim + 2 * (i + 1), static_cast<std::int16_t>(ext[i]));
  for (int i = 4; i < 8; ++i) h.set<std::int16_t>(off::dim + 2 * i, 1);
  h.set<float>(off::pixdim, 1.0f);
  for (int i = 0; i < 3; ++i) h.set<float>(off::pixdim + 4 * (i + 1), static_cast<float>(g.spacing[i]));
  h.set<std::int16_t>(off::sform_code, 1);
  for (int r = 0; r < 3; ++r) h.set<float>(off::srow_x + 16 * r + 4 * r, static_cast<float>(g.spacing[r]));
  h.set<std::uint8_t>(123, 2 | 8);  // xyzt_units: mm, sec
  h.set_magic();
  return h.bytes();
}

// Writes one volume, or several equally shaped volumes as a 4D image with the
// volumes along the fourth axis.
template <class T>
void write_volumes(const std::filesystem::path& path, const std::vector<const Grid3<T>*>& grids,
                   const Geometry& geometry) {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, std::uint8_t>, "float32 or uint8 volumes only");
  if (grids.empty()) throw NiftiError("write: no volumes");
  const auto& s = grids[0]->shape;
  for (const auto* g : grids)
    if (g->shape != s) throw NiftiError("write: volumes differ in shape");
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  NiftiHeaderBytes bytes = geometry.has_header ? geometry.header : make_header(s, geometry);
  detail::Header h(bytes);
  const bool four_d = grids.size() > 1;
  h.set<std::int16_t>(off::dim, four_d ? 4 : 3);
  for (int i = 0; i < 3; ++i) h.set<std::int16_t>(off::dim + 2 * (i + 1), static_cast<std::int16_t>(s[i]));
  for (int i = 4; i < 8; ++i) h.set<std::int16_t>(off::dim + 2 * i, 1);
  if (four_d) {
    h.set<std::int16_t>(off::dim + 8, static_cast<std::int16_t>(grids.size()));
    h.set<float>(off::pixdim + 16, 1.0f);
  }
  h.set<std::int16_t>(off::datatype, std::is_same_v<T, float> ? dt::float32 : dt::uint8);
  h.set<std::int16_t>(off::bitpix, std::is_same_v<T, float> ? 32 : 8);
  h.set<float>(off::vox_offset, 352.0f);
  h.set<float>(off::scl_slope, 1.0f);
  h.set<float>(off::scl_inter, 0.0f);
  h.set<float>(124, 0.0f);  // cal_max
  h.set<float>(128, 0.0f);  // cal_min
  bytes = h.bytes();

  detail::GzFile file(path, detail::is_gz(path) ? "wb6" : "wbT");
  if (!file.f) throw NiftiError("cannot open " + path.string() + " for writing");
  file.write(bytes.data(), bytes.size());
  const std::uint8_t ext[4] = {0, 0, 0, 0};
  file.write(ext, 4);
  std::vector<T> fortran(grids[0]->size());
  for (const auto* g : grids) {
    for (std::int64_t k = 0; k < s[2]; ++k)
      for (std::int64_t j = 0; j < s[1]; ++j)
        for (std::int64_t i = 0; i < s[0]; ++i)
          fortran[static_cast<std::size_t>((k * s[1] + j) * s[0] + i)] = (*g)(i, j, k);
    file.write(fortran.data(), fortran.size() * sizeof(T));
  }
}

template <class T>
void write(const std::filesystem::path& path, const Grid3<T>& grid, const Geometry& geometry) {
  write_volumes<T>(path, {&grid}, geometry);
}

}  // namespace tumorseg::nifti
