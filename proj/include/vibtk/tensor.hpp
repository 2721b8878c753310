#pragma once

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "vibtk/errors.hpp"

namespace vibtk {

/// Dense row-major single-precision array with shape metadata.
struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<float> data;

  Tensor() = default;
  Tensor(std::vector<std::size_t> s, std::vector<float> d) : shape(std::move(s)), data(std::move(d)) {
    if (numel(shape) != data.size())
      throw shape_error("data length " + std::to_string(data.size()) + " does not match shape " + shape_str());
  }

  static std::size_t numel(const std::vector<std::size_t>& s) {
    std::size_t n = 1;
    for (auto e : s) n *= e;
    return n;
  }

  static Tensor zeros(std::vector<std::size_t> s) {
    auto n = numel(s);
    return Tensor(std::move(s), std::vector<float>(n, 0.0f));
  }

  static Tensor full(std::vector<std::size_t> s, float v) {
    auto n = numel(s);
    return Tensor(std::move(s), std::vector<float>(n, v));
  }

  static Tensor scalar(float v) { return Tensor({1}, {v}); }

  static Tensor row(std::vector<float> d) {
    auto n = d.size();
    return Tensor({1, n}, std::move(d));
  }

  std::size_t size() const { return data.size(); }

  /// Leading extent; 1 for rank-0/rank-1 views used as a single row.
  std::size_t rows() const { return shape.empty() ? 1 : shape[0]; }

  /// Product of all trailing extents.
  std::size_t cols() const {
    if (shape.size() < 2) return shape.empty() ? 1 : 1;
    std::size_t c = 1;
    for (std::size_t i = 1; i < shape.size(); ++i) c *= shape[i];
    return c;
  }

  float& at(std::size_t r, std::size_t c) { return data[r * cols() + c]; }
  float at(std::size_t r, std::size_t c) const { return data[r * cols() + c]; }

  bool is_scalar() const { return data.size() == 1; }

  bool all_finite() const {
    for (float v : data)
      if (!std::isfinite(v)) return false;
    return true;
  }

  std::string shape_str() const {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
    os << "]";
    return os.str();
  }
};

inline bool same_shape(const Tensor& a, const Tensor& b) { return a.shape == b.shape; }

}  // namespace vibtk
