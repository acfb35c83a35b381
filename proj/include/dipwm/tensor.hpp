#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <ostream>
#include <string>

#include "dipwm/errors.hpp"

namespace dipwm {

/// NCHW extent. Vectors and matrices are stored with h = w = 1.
struct Shape {
  int n = 0;
  int c = 0;
  int h = 0;
  int w = 0;

  constexpr Eigen::Index size() const noexcept {
    return Eigen::Index(n) * c * h * w;
  }
  constexpr Eigen::Index plane() const noexcept { return Eigen::Index(h) * w; }
  constexpr Eigen::Index per_item() const noexcept { return Eigen::Index(c) * h * w; }
  friend constexpr bool operator==(const Shape&, const Shape&) = default;
};

inline std::string to_string(const Shape& s) {
  return "[" + std::to_string(s.n) + "," + std::to_string(s.c) + "," +
         std::to_string(s.h) + "," + std::to_string(s.w) + "]";
}

inline std::ostream& operator<<(std::ostream& os, const Shape& s) {
  return os << to_string(s);
}

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
using MatrixMap = Eigen::Map<RowMatrix<Scalar>>;

template <typename Scalar>
using ConstMatrixMap = Eigen::Map<const RowMatrix<Scalar>>;

/// Dense 4-d array in NCHW order backed by an Eigen column array, so whole
/// tensors take part in Eigen array expressions through `data`.
template <typename Scalar_>
struct Tensor {
  using Scalar = Scalar_;
  using Array = Eigen::Array<Scalar, Eigen::Dynamic, 1>;

  Shape shape;
  Array data;

  Tensor() = default;
  explicit Tensor(Shape s) : shape(s), data(Array::Zero(s.size())) {}
  Tensor(Shape s, Array d) : shape(s), data(std::move(d)) {
    if (data.size() != shape.size()) {
      throw ConfigError("tensor data size does not match shape " + to_string(shape));
    }
  }

  static Tensor constant(Shape s, Scalar v) { return Tensor(s, Array::Constant(s.size(), v)); }
  static Tensor zeros(Shape s) { return Tensor(s); }

  Eigen::Index size() const noexcept { return data.size(); }
  bool empty() const noexcept { return data.size() == 0; }

  Scalar* item(int n) noexcept { return data.data() + n * shape.per_item(); }
  const Scalar* item(int n) const noexcept { return data.data() + n * shape.per_item(); }
  Scalar* plane(int n, int c) noexcept { return item(n) + c * shape.plane(); }
  const Scalar* plane(int n, int c) const noexcept { return item(n) + c * shape.plane(); }

  Scalar& operator()(int n, int c, int y, int x) noexcept {
    return data[((Eigen::Index(n) * shape.c + c) * shape.h + y) * shape.w + x];
  }
  Scalar operator()(int n, int c, int y, int x) const noexcept {
    return data[((Eigen::Index(n) * shape.c + c) * shape.h + y) * shape.w + x];
  }

  /// Item `n` viewed as a [C, H*W] row-major matrix.
  MatrixMap<Scalar> matrix(int n) { return {item(n), shape.c, shape.h * shape.w}; }
  ConstMatrixMap<Scalar> matrix(int n) const { return {item(n), shape.c, shape.h * shape.w}; }

  Tensor reshaped(Shape s) const {
    if (s.size() != shape.size()) {
      throw ConfigError("cannot reshape " + to_string(shape) + " to " + to_string(s));
    }
    return Tensor(s, data);
  }

  /// Copy of items [first, first + count).
  Tensor slice(int first, int count) const {
    Shape s = shape;
    s.n = count;
    Tensor out(s);
    out.data = data.segment(first * shape.per_item(), count * shape.per_item());
    return out;
  }

  template <typename Other>
  Tensor<Other> cast() const {
    return Tensor<Other>(shape, data.template cast<Other>());
  }

  bool all_finite() const { return data.allFinite(); }
};

using ImageTensor = Tensor<float>;

/// Image tensors hold RGB items at this side length.
inline constexpr int kImageSize = 112;

template <typename Scalar>
Tensor<Scalar> concat_items(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  if (a.empty()) return b;
  if (b.empty()) return a;
  if (a.shape.c != b.shape.c || a.shape.h != b.shape.h || a.shape.w != b.shape.w) {
    throw ConfigError("cannot concatenate " + to_string(a.shape) + " and " + to_string(b.shape));
  }
  Shape s = a.shape;
  s.n += b.shape.n;
  Tensor<Scalar> out(s);
  out.data << a.data, b.data;
  return out;
}

/// Throws unless `t` is a valid image batch: 3 channels, values in [0,1].
template <typename Scalar>
void check_image(const Tensor<Scalar>& t, int side = kImageSize) {
  if (t.shape.c != 3 || t.shape.h != side || t.shape.w != side || t.shape.n < 1) {
    throw ConfigError("expected image batch [N,3," + std::to_string(side) + "," +
                      std::to_string(side) + "], got " + to_string(t.shape));
  }
  if (!t.all_finite() || (t.data < Scalar(0)).any() || (t.data > Scalar(1)).any()) {
    throw ConfigError("image values must be finite and within [0,1]");
  }
}

/// Stable FNV-1a digest over the raw bytes of a tensor.
template <typename Scalar>
std::uint64_t checksum(const Tensor<Scalar>& t, std::uint64_t h = 1469598103934665603ull) {
  const auto* bytes = reinterpret_cast<const unsigned char*>(t.data.data());
  const std::size_t len = std::size_t(t.data.size()) * sizeof(Scalar);
  for (std::size_t i = 0; i < len; ++i) {
    h ^= bytes[i];
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace dipwm
