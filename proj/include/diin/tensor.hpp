#pragma once

#include <cstdint>
#include <sstream>
#include <string>
#include <vector>

#include "diin/errors.hpp"

namespace diin {

// Extents of a dense row-major array. All extents are positive.
using Shape = std::vector<int>;

inline std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << 'x';
    os << s[i];
  }
  os << ']';
  return os.str();
}

inline void check_shape_valid(const Shape& s, const char* what) {
  for (int d : s) {
    if (d <= 0) {
      throw ShapeError(std::string(what) + ": non-positive extent in shape " + shape_str(s));
    }
  }
}

// Dense n-dimensional value, row-major. Dtype is float for training and
// double for gradient checking.
template <typename T>
struct Tensor {
  Shape shape;
  std::vector<T> data;

  Tensor() = default;

  static Tensor zeros(Shape s) {
    check_shape_valid(s, "Tensor::zeros");
    Tensor t;
    t.data.assign(static_cast<std::size_t>(shape_numel(s)), T(0));
    t.shape = std::move(s);
    return t;
  }

  static Tensor full(Shape s, T v) {
    Tensor t = zeros(std::move(s));
    for (T& x : t.data) x = v;
    return t;
  }

  static Tensor from(Shape s, std::vector<T> d) {
    check_shape_valid(s, "Tensor::from");
    if (shape_numel(s) != static_cast<std::int64_t>(d.size())) {
      throw ShapeError("Tensor::from: shape " + shape_str(s) + " does not match data length " +
                       std::to_string(d.size()));
    }
    Tensor t;
    t.shape = std::move(s);
    t.data = std::move(d);
    return t;
  }

  std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
  int rank() const { return static_cast<int>(shape.size()); }
  int dim(int i) const { return shape[static_cast<std::size_t>(i)]; }

  bool same_shape(const Tensor& other) const { return shape == other.shape; }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out;
    out.shape = shape;
    out.data.reserve(data.size());
    for (T v : data) out.data.push_back(static_cast<U>(v));
    return out;
  }
};

}  // namespace diin
