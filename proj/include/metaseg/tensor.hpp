#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "metaseg/errors.hpp"

namespace metaseg {

using Shape = std::vector<std::int64_t>;

inline std::int64_t numel_of(const Shape& shape) {
  std::int64_t n = 1;
  for (std::int64_t d : shape) {
    if (d <= 0) throw ShapeError("non-positive dimension " + std::to_string(d) + " in shape");
    n *= d;
  }
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "(";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ")";
  return os.str();
}

// Dense row-major tensor. Plain value type: copy = deep copy.
template <typename Real>
struct Tensor {
  Shape shape;
  std::vector<Real> data;

  Tensor() = default;
  explicit Tensor(Shape s) : shape(std::move(s)), data(static_cast<std::size_t>(numel_of(shape)), Real(0)) {}
  Tensor(Shape s, std::vector<Real> d) : shape(std::move(s)), data(std::move(d)) {
    if (static_cast<std::int64_t>(data.size()) != numel_of(shape))
      throw ShapeError("data length " + std::to_string(data.size()) + " does not match shape " + shape_str(shape));
  }

  static Tensor zeros(Shape s) { return Tensor(std::move(s)); }
  static Tensor full(Shape s, Real v) {
    Tensor t(std::move(s));
    std::fill(t.data.begin(), t.data.end(), v);
    return t;
  }
  static Tensor scalar(Real v) { return Tensor({1}, {v}); }

  std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
  std::size_t ndim() const { return shape.size(); }
  std::int64_t dim(std::size_t i) const { return shape[i]; }

  Real& operator[](std::int64_t i) { return data[static_cast<std::size_t>(i)]; }
  const Real& operator[](std::int64_t i) const { return data[static_cast<std::size_t>(i)]; }

  bool same_shape(const Tensor& other) const { return shape == other.shape; }
};

// Integer mask (class ids); shares the dense row-major layout.
struct IntMask {
  Shape shape;
  std::vector<std::int32_t> data;

  IntMask() = default;
  explicit IntMask(Shape s) : shape(std::move(s)), data(static_cast<std::size_t>(numel_of(shape)), 0) {}
  IntMask(Shape s, std::vector<std::int32_t> d) : shape(std::move(s)), data(std::move(d)) {
    if (static_cast<std::int64_t>(data.size()) != numel_of(shape))
      throw ShapeError("mask data length does not match shape " + shape_str(shape));
  }

  std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
  std::int64_t dim(std::size_t i) const { return shape[i]; }

  std::int32_t& operator[](std::int64_t i) { return data[static_cast<std::size_t>(i)]; }
  const std::int32_t& operator[](std::int64_t i) const { return data[static_cast<std::size_t>(i)]; }

  bool operator==(const IntMask& o) const { return shape == o.shape && data == o.data; }
};

template <typename Real>
inline void check_finite(const Tensor<Real>& t, const char* context) {
  for (std::size_t i = 0; i < t.data.size(); ++i) {
    if (!std::isfinite(static_cast<double>(t.data[i])))
      throw NumericError(std::string(context) + ": non-finite value at flat index " + std::to_string(i));
  }
}

inline void require_same_shape(const Shape& a, const Shape& b, const char* context) {
  if (a != b) throw ShapeError(std::string(context) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

// Named parameter tree; the unit grad_check and the optimizers operate on.
template <typename Real>
using ParamTree = std::map<std::string, Tensor<Real>>;

// Gradient per parameter name; shapes mirror the parameters.
template <typename Real>
using GradMap = std::map<std::string, Tensor<Real>>;

}  // namespace metaseg
