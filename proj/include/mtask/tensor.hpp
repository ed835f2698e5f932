#pragma once

#include <cstdint>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "mtask/error.hpp"

namespace mtask {

using Shape = std::vector<int>;

inline int64_t numel_of(const Shape& s) {
  int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

// Dense n-dimensional array of doubles in row-major order. `grad` is empty
// until a backward pass fills it; when present it has the same length as
// `values`.
struct Tensor {
  Shape shape;
  std::vector<double> values;
  std::vector<double> grad;
  bool requires_grad = false;

  Tensor() = default;
  Tensor(Shape s, std::vector<double> v) : shape(std::move(s)), values(std::move(v)) {
    if (numel_of(shape) != static_cast<int64_t>(values.size()))
      throw ShapeError("tensor: shape " + shape_str(shape) + " does not match " +
                       std::to_string(values.size()) + " values");
    for (int d : shape)
      if (d <= 0) throw ShapeError("tensor: non-positive dimension in " + shape_str(shape));
  }

  static Tensor zeros(Shape s) {
    size_t n = static_cast<size_t>(numel_of(s));
    return Tensor(std::move(s), std::vector<double>(n, 0.0));
  }

  static Tensor full(Shape s, double v) {
    size_t n = static_cast<size_t>(numel_of(s));
    return Tensor(std::move(s), std::vector<double>(n, v));
  }

  static Tensor scalar(double v) { return Tensor({1}, {v}); }

  int64_t numel() const { return static_cast<int64_t>(values.size()); }

  Tensor& with_grad(bool rg = true) {
    requires_grad = rg;
    return *this;
  }
};

}  // namespace mtask
