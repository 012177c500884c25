#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "uvp/common.hpp"
#include "uvp/tensor.hpp"

namespace uvp::io {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// npy: the self-describing array container for datasets. Version 1.0 header,
// little-endian payloads; dtypes limited to <f4 and |u1.

inline void write_npy_raw(const fs::path& path, const std::string& descr,
                          const std::vector<int64_t>& shape, const void* data,
                          size_t bytes) {
  std::ostringstream hdr;
  hdr << "{'descr': '" << descr << "', 'fortran_order': False, 'shape': (";
  for (size_t i = 0; i < shape.size(); ++i) hdr << shape[i] << (shape.size() == 1 ? "," : (i + 1 < shape.size() ? ", " : ""));
  hdr << "), }";
  std::string h = hdr.str();
  size_t total = 10 + h.size() + 1;
  size_t padded = (total + 63) / 64 * 64;
  h.append(padded - 10 - h.size() - 1, ' ');
  h.push_back('\n');

  std::ofstream f(path, std::ios::binary);
  check(f.good(), "cannot open for write: " + path.string());
  const unsigned char magic[8] = {0x93, 'N', 'U', 'M', 'P', 'Y', 1, 0};
  f.write(reinterpret_cast<const char*>(magic), 8);
  uint16_t hlen = static_cast<uint16_t>(h.size());
  f.write(reinterpret_cast<const char*>(&hlen), 2);
  f.write(h.data(), static_cast<std::streamsize>(h.size()));
  f.write(static_cast<const char*>(data), static_cast<std::streamsize>(bytes));
  check(f.good(), "write failed: " + path.string());
}

inline void write_npy(const fs::path& path, const GridF& g) {
  write_npy_raw(path, "<f4", g.shape, g.v.data(), g.v.size() * sizeof(float));
}

inline void write_npy_u8(const fs::path& path, const std::vector<int64_t>& shape,
                         const std::vector<uint8_t>& data) {
  check_shape(static_cast<int64_t>(data.size()) == Tensor::numel_of(shape),
              "u8 array does not match shape");
  write_npy_raw(path, "|u1", shape, data.data(), data.size());
}

struct NpyHeader {
  std::string descr;
  std::vector<int64_t> shape;
  size_t payload_offset = 0;
};

inline NpyHeader read_npy_header(std::ifstream& f, const std::string& name) {
  unsigned char magic[8];
  f.read(reinterpret_cast<char*>(magic), 8);
  check(f.good() && magic[0] == 0x93 && std::memcmp(magic + 1, "NUMPY", 5) == 0,
        "not an npy file: " + name);
  uint16_t hlen = 0;
  f.read(reinterpret_cast<char*>(&hlen), 2);
  std::string h(hlen, '\0');
  f.read(h.data(), hlen);
  check(f.good(), "truncated npy header: " + name);

  NpyHeader out;
  out.payload_offset = 10 + hlen;
  auto dpos = h.find("'descr':");
  check(dpos != std::string::npos, "npy header missing descr: " + name);
  auto q0 = h.find('\'', dpos + 8);
  auto q1 = h.find('\'', q0 + 1);
  out.descr = h.substr(q0 + 1, q1 - q0 - 1);
  auto spos = h.find("'shape':");
  auto p0 = h.find('(', spos);
  auto p1 = h.find(')', p0);
  std::string dims = h.substr(p0 + 1, p1 - p0 - 1);
  std::istringstream ds(dims);
  std::string tok;
  while (std::getline(ds, tok, ',')) {
    std::istringstream ts(tok);
    int64_t v;
    if (ts >> v) out.shape.push_back(v);
  }
  return out;
}

inline GridF read_npy_f32(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  check(f.good(), "cannot open: " + path.string());
  NpyHeader h = read_npy_header(f, path.string());
  check(h.descr == "<f4", "expected <f4 npy, got " + h.descr + " in " + path.string());
  GridF g(h.shape);
  f.read(reinterpret_cast<char*>(g.v.data()),
         static_cast<std::streamsize>(g.v.size() * sizeof(float)));
  check(f.good(), "truncated npy payload: " + path.string());
  return g;
}

inline std::vector<uint8_t> read_npy_u8(const fs::path& path, std::vector<int64_t>& shape) {
  std::ifstream f(path, std::ios::binary);
  check(f.good(), "cannot open: " + path.string());
  NpyHeader h = read_npy_header(f, path.string());
  check(h.descr == "|u1", "expected |u1 npy, got " + h.descr + " in " + path.string());
  shape = h.shape;
  std::vector<uint8_t> data(static_cast<size_t>(Tensor::numel_of(shape)));
  f.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size()));
  check(f.good(), "truncated npy payload: " + path.string());
  return data;
}

// ---------------------------------------------------------------------------
// ppm: 8-bit lossless raster for visualization and inference output.

inline void write_ppm(const fs::path& path, int64_t h, int64_t w,
                      const std::vector<uint8_t>& rgb) {
  check_shape(static_cast<int64_t>(rgb.size()) == h * w * 3, "ppm buffer size mismatch");
  std::ofstream f(path, std::ios::binary);
  check(f.good(), "cannot open for write: " + path.string());
  f << "P6\n" << w << " " << h << "\n255\n";
  f.write(reinterpret_cast<const char*>(rgb.data()), static_cast<std::streamsize>(rgb.size()));
  check(f.good(), "write failed: " + path.string());
}

// ---------------------------------------------------------------------------
// blob: versioned key->tensor container used by every checkpoint. Strings
// and raw byte entries share the same section table.

struct Blob {
  std::string kind;            // e.g. "codec-checkpoint"
  uint32_t version = 1;
  std::map<std::string, Tensor> tensors;
  std::map<std::string, std::string> strings;

  void put(const std::string& key, const Tensor& t) { tensors[key] = t; }
  void put(const std::string& key, const std::string& s) { strings[key] = s; }

  const Tensor& tensor(const std::string& key) const {
    auto it = tensors.find(key);
    check(it != tensors.end(), "checkpoint missing tensor: " + key);
    return it->second;
  }
  const std::string& str(const std::string& key) const {
    auto it = strings.find(key);
    check(it != strings.end(), "checkpoint missing field: " + key);
    return it->second;
  }
  double number(const std::string& key) const { return tensor(key)[0]; }
  bool has_tensor(const std::string& key) const { return tensors.count(key) > 0; }
};

namespace detail {
inline void put_u64(std::ofstream& f, uint64_t v) {
  f.write(reinterpret_cast<const char*>(&v), 8);
}
inline uint64_t get_u64(std::ifstream& f) {
  uint64_t v = 0;
  f.read(reinterpret_cast<char*>(&v), 8);
  return v;
}
inline void put_str(std::ofstream& f, const std::string& s) {
  put_u64(f, s.size());
  f.write(s.data(), static_cast<std::streamsize>(s.size()));
}
inline std::string get_str(std::ifstream& f) {
  uint64_t n = get_u64(f);
  std::string s(n, '\0');
  f.read(s.data(), static_cast<std::streamsize>(n));
  return s;
}
}  // namespace detail

inline void save_blob(const fs::path& path, const Blob& b) {
  std::ofstream f(path, std::ios::binary);
  check(f.good(), "cannot open for write: " + path.string());
  f.write("UVPBLOB1", 8);
  detail::put_str(f, b.kind);
  uint64_t ver = b.version;
  detail::put_u64(f, ver);
  detail::put_u64(f, b.strings.size());
  for (const auto& [k, v] : b.strings) {
    detail::put_str(f, k);
    detail::put_str(f, v);
  }
  detail::put_u64(f, b.tensors.size());
  for (const auto& [k, t] : b.tensors) {
    detail::put_str(f, k);
    detail::put_u64(f, t.shape.size());
    for (int64_t d : t.shape) detail::put_u64(f, static_cast<uint64_t>(d));
    f.write(reinterpret_cast<const char*>(t.v.data()),
            static_cast<std::streamsize>(t.v.size() * sizeof(double)));
  }
  check(f.good(), "write failed: " + path.string());
}

inline Blob load_blob(const fs::path& path, const std::string& expect_kind,
                      uint32_t expect_version) {
  std::ifstream f(path, std::ios::binary);
  check(f.good(), "cannot open: " + path.string());
  char magic[8];
  f.read(magic, 8);
  check(f.good() && std::memcmp(magic, "UVPBLOB1", 8) == 0,
        "not a uvp blob: " + path.string());
  Blob b;
  b.kind = detail::get_str(f);
  check(b.kind == expect_kind,
        "checkpoint kind mismatch in " + path.string() + ": expected '" +
            expect_kind + "', found '" + b.kind + "'");
  b.version = static_cast<uint32_t>(detail::get_u64(f));
  check(b.version == expect_version,
        "checkpoint version mismatch in " + path.string() + ": expected " +
            std::to_string(expect_version) + ", found " + std::to_string(b.version));
  uint64_t ns = detail::get_u64(f);
  for (uint64_t i = 0; i < ns; ++i) {
    std::string k = detail::get_str(f);
    b.strings[k] = detail::get_str(f);
  }
  uint64_t nt = detail::get_u64(f);
  for (uint64_t i = 0; i < nt; ++i) {
    std::string k = detail::get_str(f);
    uint64_t rank = detail::get_u64(f);
    std::vector<int64_t> shape(rank);
    for (auto& d : shape) d = static_cast<int64_t>(detail::get_u64(f));
    Tensor t(shape);
    f.read(reinterpret_cast<char*>(t.v.data()),
           static_cast<std::streamsize>(t.v.size() * sizeof(double)));
    b.tensors[k] = std::move(t);
  }
  check(f.good(), "truncated blob: " + path.string());
  return b;
}

inline uint64_t file_hash(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  check(f.good(), "cannot open: " + path.string());
  uint64_t h = 1469598103934665603ull;
  char buf[65536];
  while (f.good()) {
    f.read(buf, sizeof(buf));
    h = fnv1a(buf, static_cast<size_t>(f.gcount()), h);
  }
  return h;
}

inline bool files_identical(const fs::path& a, const fs::path& b) {
  std::ifstream fa(a, std::ios::binary), fb(b, std::ios::binary);
  if (!fa.good() || !fb.good()) return false;
  std::ostringstream sa, sb;
  sa << fa.rdbuf();
  sb << fb.rdbuf();
  return sa.str() == sb.str();
}

}  // namespace uvp::io
