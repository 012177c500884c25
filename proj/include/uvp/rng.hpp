#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>

#include "uvp/common.hpp"
#include "uvp/tensor.hpp"

namespace uvp {

// Seeded random stream with hand-rolled distributions. std::*_distribution
// output is implementation-defined, so uniform and gaussian draws are built
// directly from the mt19937_64 word stream; the engine state serializes to
// text for checkpoint resume.
class Rng {
public:
  Rng() : eng_(0x9e3779b97f4a7c15ull) {}
  explicit Rng(uint64_t seed) : eng_(seed ^ 0x9e3779b97f4a7c15ull) {}

  uint64_t next_u64() { return eng_(); }

  // Uniform in [0, 1).
  double uniform() {
    return static_cast<double>(eng_() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  int64_t uniform_int(int64_t n) {  // [0, n)
    check(n > 0, "uniform_int needs n > 0");
    return static_cast<int64_t>(eng_() % static_cast<uint64_t>(n));
  }

  // Box-Muller; draws two uniforms per call so no spare is cached.
  double gaussian() {
    double u1 = 0.0;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586477 * u2);
  }

  double gaussian(double mean, double stddev) { return mean + stddev * gaussian(); }

  Tensor randn(std::vector<int64_t> shape, double stddev = 1.0) {
    Tensor t(std::move(shape));
    for (auto& x : t.v) x = stddev * gaussian();
    return t;
  }

  Tensor rand_uniform(std::vector<int64_t> shape, double lo, double hi) {
    Tensor t(std::move(shape));
    for (auto& x : t.v) x = uniform(lo, hi);
    return t;
  }

  // Derives an independent stream; mixing is splitmix64-style so nearby
  // labels do not correlate.
  Rng fork(uint64_t label) {
    uint64_t z = next_u64() + 0x9e3779b97f4a7c15ull * (label + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return Rng(z ^ (z >> 31));
  }

  std::string state() const {
    std::ostringstream os;
    os << eng_;
    return os.str();
  }

  void set_state(const std::string& s) {
    std::istringstream is(s);
    is >> eng_;
    check(!is.fail(), "bad rng state string");
  }

private:
  explicit Rng(uint64_t raw, bool) : eng_(raw) {}
  std::mt19937_64 eng_;
};

}  // namespace uvp
