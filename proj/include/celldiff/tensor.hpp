#pragma once

#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "celldiff/rng.hpp"

namespace celldiff {

// Dense row-major tensor of 64-bit floats. Shapes are small (desk scale), so
// no view machinery; every op produces a fresh tensor.
struct Tensor {
  std::vector<int> shape;
  std::vector<double> v;

  Tensor() = default;
  Tensor(std::vector<int> s, std::vector<double> data)
      : shape(std::move(s)), v(std::move(data)) {
    if (numel_of(shape) != static_cast<int64_t>(v.size()))
      throw std::invalid_argument("Tensor: shape/value length mismatch");
  }

  static int64_t numel_of(const std::vector<int>& s) {
    int64_t n = 1;
    for (int d : s) n *= d;
    return n;
  }

  static Tensor zeros(std::vector<int> s) {
    auto n = numel_of(s);
    return Tensor(std::move(s), std::vector<double>(n, 0.0));
  }
  static Tensor full(std::vector<int> s, double x) {
    auto n = numel_of(s);
    return Tensor(std::move(s), std::vector<double>(n, x));
  }
  static Tensor scalar(double x) { return Tensor({1}, {x}); }
  static Tensor randn(std::vector<int> s, Rng& rng, double stddev = 1.0) {
    auto n = numel_of(s);
    std::vector<double> d(n);
    for (auto& x : d) x = stddev * rng.normal();
    return Tensor(std::move(s), std::move(d));
  }

  int64_t numel() const { return static_cast<int64_t>(v.size()); }
  int ndim() const { return static_cast<int>(shape.size()); }
  // matrix accessors (2-D, or 1-D treated as a single row)
  int rows() const { return ndim() == 2 ? shape[0] : 1; }
  int cols() const { return ndim() == 2 ? shape[1] : shape[0]; }
  double& at(int r, int c) { return v[static_cast<size_t>(r) * cols() + c]; }
  double at(int r, int c) const { return v[static_cast<size_t>(r) * cols() + c]; }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  bool all_finite() const {
    for (double x : v)
      if (!std::isfinite(x)) return false;
    return true;
  }
};

inline std::string shape_str(const std::vector<int>& s) {
  std::string out = "(";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + ")";
}

}  // namespace celldiff
