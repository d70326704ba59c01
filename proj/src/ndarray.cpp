#include "flowseg/ndarray.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace flowseg {

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << ',';
    os << s[i];
  }
  os << ']';
  return os.str();
}

std::int64_t numel(const Shape& s) {
  std::int64_t n = 1;
  for (auto e : s) n *= e;
  return n;
}

static void check_extents(const Shape& s) {
  for (auto e : s) {
    if (e < 0) throw ShapeError("negative extent in shape " + shape_str(s));
  }
}

NdArr::NdArr(Shape shape, Real fill) : shape_(std::move(shape)) {
  check_extents(shape_);
  data_.assign(static_cast<std::size_t>(numel(shape_)), fill);
}

NdArr::NdArr(Shape shape, std::vector<Real> data) : shape_(std::move(shape)), data_(std::move(data)) {
  check_extents(shape_);
  if (numel(shape_) != static_cast<std::int64_t>(data_.size())) {
    throw ShapeError("NdArr: shape " + shape_str(shape_) + " does not match " +
                     std::to_string(data_.size()) + " values");
  }
}

NdArr NdArr::from(std::initializer_list<Real> values) {
  return NdArr(Shape{static_cast<std::int64_t>(values.size())}, std::vector<Real>(values));
}

Real& NdArr::at(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) {
  return data_[static_cast<std::size_t>(((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w)];
}

Real NdArr::at(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) const {
  return data_[static_cast<std::size_t>(((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w)];
}

Real NdArr::item() const {
  if (data_.size() != 1) throw ShapeError("item(): expected one element, got shape " + shape_str(shape_));
  return data_[0];
}

NdArr NdArr::reshaped(Shape s) const {
  if (numel(s) != size()) {
    throw ShapeError("reshape: cannot view " + shape_str(shape_) + " as " + shape_str(s));
  }
  return NdArr(std::move(s), data_);
}

void NdArr::fill(Real v) { std::fill(data_.begin(), data_.end(), v); }

void require_same_shape(const char* op, const Shape& a, const Shape& b) {
  if (a != b) throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

NdArr& NdArr::operator+=(const NdArr& o) {
  require_same_shape("add", shape_, o.shape_);
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
  return *this;
}

NdArr& NdArr::operator-=(const NdArr& o) {
  require_same_shape("sub", shape_, o.shape_);
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= o.data_[i];
  return *this;
}

NdArr& NdArr::operator*=(Real s) {
  for (auto& v : data_) v *= s;
  return *this;
}

NdArr operator+(NdArr a, const NdArr& b) { return a += b; }
NdArr operator-(NdArr a, const NdArr& b) { return a -= b; }
NdArr operator*(NdArr a, Real s) { return a *= s; }

Real sum(const NdArr& a) {
  Real s = 0;
  for (auto v : a.vec()) s += v;
  return s;
}

Real mean(const NdArr& a) { return a.empty() ? Real(0) : sum(a) / static_cast<Real>(a.size()); }

Real dot(const NdArr& a, const NdArr& b) {
  require_same_shape("dot", a.shape(), b.shape());
  Real s = 0;
  for (std::int64_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

Real max_abs(const NdArr& a) {
  Real m = 0;
  for (auto v : a.vec()) m = std::max(m, std::abs(v));
  return m;
}

Real max_abs_diff(const NdArr& a, const NdArr& b) {
  require_same_shape("max_abs_diff", a.shape(), b.shape());
  Real m = 0;
  for (std::int64_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

bool all_finite(const NdArr& a) {
  return std::all_of(a.vec().begin(), a.vec().end(), [](Real v) { return std::isfinite(v); });
}

}  // namespace flowseg
