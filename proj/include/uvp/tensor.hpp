#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "uvp/common.hpp"

namespace uvp {

// Dense row-major tensor of doubles. All model math runs in double so that
// analytic gradients can be checked against central finite differences.
struct Tensor {
  std::vector<int64_t> shape;
  std::vector<double> v;

  Tensor() = default;
  explicit Tensor(std::vector<int64_t> s) : shape(std::move(s)) {
    v.assign(static_cast<size_t>(numel_of(shape)), 0.0);
  }
  Tensor(std::vector<int64_t> s, std::vector<double> data)
      : shape(std::move(s)), v(std::move(data)) {
    check_shape(static_cast<int64_t>(v.size()) == numel_of(shape),
                "tensor data does not match shape");
  }

  static int64_t numel_of(const std::vector<int64_t>& s) {
    int64_t n = 1;
    for (int64_t d : s) {
      check_shape(d >= 0, "negative dimension");
      n *= d;
    }
    return n;
  }

  int64_t numel() const { return static_cast<int64_t>(v.size()); }
  int64_t dim(int i) const { return shape.at(static_cast<size_t>(i)); }
  int rank() const { return static_cast<int>(shape.size()); }

  double* data() { return v.data(); }
  const double* data() const { return v.data(); }

  double& operator[](int64_t i) { return v[static_cast<size_t>(i)]; }
  double operator[](int64_t i) const { return v[static_cast<size_t>(i)]; }

  static Tensor zeros(std::vector<int64_t> s) { return Tensor(std::move(s)); }

  static Tensor full(std::vector<int64_t> s, double value) {
    Tensor t(std::move(s));
    std::fill(t.v.begin(), t.v.end(), value);
    return t;
  }

  static Tensor scalar(double value) { return Tensor({1}, {value}); }

  Tensor reshaped(std::vector<int64_t> s) const {
    check_shape(numel_of(s) == numel(), "reshape changes element count");
    Tensor t;
    t.shape = std::move(s);
    t.v = v;
    return t;
  }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  bool all_finite() const {
    for (double x : v)
      if (!std::isfinite(x)) return false;
    return true;
  }

  double max_abs() const {
    double m = 0.0;
    for (double x : v) m = std::max(m, std::fabs(x));
    return m;
  }

  std::string shape_str() const {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape.size(); ++i) {
      if (i) os << "x";
      os << shape[i];
    }
    os << "]";
    return os.str();
  }
};

inline std::string shape_str(const std::vector<int64_t>& s) {
  Tensor t;
  t.shape = s;
  return t.shape_str();
}

// Float32 grid used on the datagen side: clips and ground truth are stored
// and round-tripped at file precision so write/read is bit-exact.
struct GridF {
  std::vector<int64_t> shape;
  std::vector<float> v;

  GridF() = default;
  explicit GridF(std::vector<int64_t> s) : shape(std::move(s)) {
    v.assign(static_cast<size_t>(Tensor::numel_of(shape)), 0.0f);
  }

  int64_t numel() const { return static_cast<int64_t>(v.size()); }
  int64_t dim(int i) const { return shape.at(static_cast<size_t>(i)); }
  float& operator[](int64_t i) { return v[static_cast<size_t>(i)]; }
  float operator[](int64_t i) const { return v[static_cast<size_t>(i)]; }

  Tensor to_tensor() const {
    Tensor t;
    t.shape = shape;
    t.v.assign(v.begin(), v.end());
    return t;
  }

  static GridF from_tensor(const Tensor& t) {
    GridF g;
    g.shape = t.shape;
    g.v.assign(t.v.begin(), t.v.end());
    return g;
  }
};

}  // namespace uvp
