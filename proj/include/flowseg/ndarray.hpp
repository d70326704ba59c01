#pragma once

#include <cstdint>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace flowseg {

#ifdef FLOWSEG_FLOAT32
using Real = float;
#else
using Real = double;
#endif

using Shape = std::vector<std::int64_t>;

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised when operands have incompatible shapes.
class ShapeError : public Error {
 public:
  using Error::Error;
};

std::string shape_str(const Shape& s);
std::int64_t numel(const Shape& s);

/// Dense row-major n-dimensional array. Convolution tensors use N x C x H x W.
class NdArr {
 public:
  NdArr() = default;
  explicit NdArr(Shape shape, Real fill = Real(0));
  NdArr(Shape shape, std::vector<Real> data);

  static NdArr zeros(Shape shape) { return NdArr(std::move(shape)); }
  static NdArr full(Shape shape, Real v) { return NdArr(std::move(shape), v); }
  static NdArr scalar(Real v) { return NdArr(Shape{1}, v); }
  static NdArr from(std::initializer_list<Real> values);

  const Shape& shape() const { return shape_; }
  std::int64_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t rank() const { return shape_.size(); }
  std::int64_t size() const { return static_cast<std::int64_t>(data_.size()); }
  bool empty() const { return data_.empty(); }

  Real* data() { return data_.data(); }
  const Real* data() const { return data_.data(); }
  std::span<Real> span() { return data_; }
  std::span<const Real> span() const { return data_; }
  std::vector<Real>& vec() { return data_; }
  const std::vector<Real>& vec() const { return data_; }

  Real& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
  Real operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

  /// 4-D accessor (n, c, h, w).
  Real& at(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w);
  Real at(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) const;

  /// Scalar value; requires exactly one element.
  Real item() const;

  NdArr reshaped(Shape s) const;
  void fill(Real v);

  NdArr& operator+=(const NdArr& o);
  NdArr& operator-=(const NdArr& o);
  NdArr& operator*=(Real s);

  bool operator==(const NdArr& o) const = default;

 private:
  Shape shape_;
  std::vector<Real> data_;
};

NdArr operator+(NdArr a, const NdArr& b);
NdArr operator-(NdArr a, const NdArr& b);
NdArr operator*(NdArr a, Real s);

Real sum(const NdArr& a);
Real mean(const NdArr& a);
Real dot(const NdArr& a, const NdArr& b);
Real max_abs(const NdArr& a);
Real max_abs_diff(const NdArr& a, const NdArr& b);
bool all_finite(const NdArr& a);

void require_same_shape(const char* op, const Shape& a, const Shape& b);

}  // namespace flowseg
