#pragma once

#include <cstdint>
#include <cstdlib>
#include <functional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace uvp {

// Base error for anything that goes wrong at runtime (bad shapes, corrupt
// files, diverged training). ConfigError is reserved for invalid user
// configuration; the CLI maps it to exit code 2.
class Error : public std::runtime_error {
public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

class ConfigError : public Error {
public:
  explicit ConfigError(const std::string& msg) : Error(msg) {}
};

class ShapeError : public Error {
public:
  explicit ShapeError(const std::string& msg) : Error(msg) {}
};

class IntegrityError : public Error {
public:
  explicit IntegrityError(const std::string& msg) : Error(msg) {}
};

inline void check(bool cond, const std::string& msg) {
  if (!cond) throw Error(msg);
}

inline void check_shape(bool cond, const std::string& msg) {
  if (!cond) throw ShapeError(msg);
}

// Worker count. UVP_THREADS overrides; 0 means hardware concurrency.
inline int thread_count() {
  static int n = [] {
    if (const char* env = std::getenv("UVP_THREADS")) {
      int v = std::atoi(env);
      if (v > 0) return v;
    }
    unsigned hc = std::thread::hardware_concurrency();
    return hc > 0 ? static_cast<int>(hc) : 1;
  }();
  return n;
}

// Splits [0, n) into contiguous chunks, one per worker. Each index is
// processed by exactly one thread and every chunk runs sequentially, so
// results are bitwise identical for any thread count.
template <typename F>
void parallel_for(int64_t n, F&& body) {
  if (n <= 0) return;
  int nt = thread_count();
  if (nt <= 1 || n < 2 * nt) {
    body(int64_t{0}, n);
    return;
  }
  std::vector<std::thread> workers;
  workers.reserve(nt);
  int64_t chunk = (n + nt - 1) / nt;
  for (int t = 0; t < nt; ++t) {
    int64_t b = t * chunk;
    int64_t e = std::min(n, b + chunk);
    if (b >= e) break;
    workers.emplace_back([&body, b, e] { body(b, e); });
  }
  for (auto& w : workers) w.join();
}

// FNV-1a, used for config hashes and checkpoint cross-checks.
inline uint64_t fnv1a(const void* data, size_t len, uint64_t seed = 1469598103934665603ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  uint64_t h = seed;
  for (size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 1099511628211ull;
  }
  return h;
}

inline uint64_t fnv1a(const std::string& s, uint64_t seed = 1469598103934665603ull) {
  return fnv1a(s.data(), s.size(), seed);
}

}  // namespace uvp
