#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "tumorseg/core/error.hpp"

namespace tumorseg {

using Shape = std::vector<std::int64_t>;

inline std::int64_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::int64_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  return os.str();
}

// Dense row-major tensor with value semantics. A "meta" tensor carries a
// shape but no storage; every op accepts meta inputs and returns a meta
// output of the correct shape, which lets full-size graphs be traced
// without allocating activations.
template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T{0})
      : shape_(std::move(shape)), data_(static_cast<std::size_t>(shape_numel(shape_)), fill) {
    for (auto d : shape_)
      if (d < 0) throw ShapeError("negative extent in " + shape_str(shape_));
  }
  Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (static_cast<std::int64_t>(data_.size()) != shape_numel(shape_))
      throw ShapeError("data size " + std::to_string(data_.size()) + " does not match shape " +
                       shape_str(shape_));
  }

  static Tensor meta(Shape shape) {
    Tensor t;
    t.shape_ = std::move(shape);
    t.meta_ = true;
    return t;
  }

  const Shape& shape() const { return shape_; }
  std::int64_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t rank() const { return shape_.size(); }
  std::size_t numel() const { return static_cast<std::size_t>(shape_numel(shape_)); }
  bool is_meta() const { return meta_; }
  bool empty() const { return shape_.empty() && data_.empty() && !meta_; }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::span<T> span() { return data_; }
  std::span<const T> span() const { return data_; }
  std::vector<T>& vec() { return data_; }
  const std::vector<T>& vec() const { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  T item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape_));
    return data_[0];
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  Tensor reshaped(Shape s) const {
    if (shape_numel(s) != shape_numel(shape_))
      throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(s));
    Tensor r = *this;
    r.shape_ = std::move(s);
    return r;
  }

  template <class U>
  Tensor<U> cast() const {
    if (meta_) return Tensor<U>::meta(shape_);
    Tensor<U> r(shape_);
    std::transform(data_.begin(), data_.end(), r.data(), [](T v) { return static_cast<U>(v); });
    return r;
  }

 private:
  Shape shape_;
  std::vector<T> data_;
  bool meta_ = false;
};

template <class T>
Tensor<T> zeros_like(const Tensor<T>& t) {
  return t.is_meta() ? Tensor<T>::meta(t.shape()) : Tensor<T>(t.shape());
}

// Extents of a 5D (N, C, X, Y, Z) activation.
struct Dims5 {
  std::int64_t n, c, x, y, z;
  std::int64_t spatial() const { return x * y * z; }
};

inline Dims5 dims5(const Shape& s) {
  if (s.size() != 5) throw ShapeError("expected 5D (N,C,X,Y,Z) tensor, got " + shape_str(s));
  return {s[0], s[1], s[2], s[3], s[4]};
}

}  // namespace tumorseg
