#pragma once

// Flat binary snapshot shared by backbones, PET parameters, mapping networks
// and endpoint tables. All integers and floats are little-endian.
//
//   offset  size  field
//   0       8     magic "SBRGSNAP"
//   8       4     u32 format version (1)
//   12      4     u32 kind tag (SnapshotKind)
//   16      4     u32 header length H
//   20      H     header: UTF-8 JSON object (configuration, method tags)
//   ..      4     u32 tensor count
//   per tensor:
//           4     u32 name length, then the name bytes
//           4     u32 rank R, then R x u64 dimensions
//           8*n   f64 values, row-major

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "sbreg/tensor.hpp"

namespace sbreg {

enum class SnapshotKind : std::uint32_t { Backbone = 1, Pet = 2, MapNet = 3, Endpoints = 4 };

inline constexpr std::array<char, 8> kSnapshotMagic{'S', 'B', 'R', 'G', 'S', 'N', 'A', 'P'};
inline constexpr std::uint32_t kSnapshotVersion = 1;

class SnapshotError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct NamedTensor {
  std::string name;
  Shape shape;
  std::vector<double> data;
};

struct Snapshot {
  SnapshotKind kind = SnapshotKind::Backbone;
  nlohmann::json header = nlohmann::json::object();
  std::vector<NamedTensor> tensors;

  const NamedTensor& get(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return t;
    throw SnapshotError("snapshot: missing tensor '" + name + "'");
  }
  Tensor tensor(const std::string& name, bool requires_grad = false) const {
    const auto& t = get(name);
    return Tensor::from(t.shape, t.data, requires_grad);
  }
  void add(std::string name, const Tensor& t) {
    tensors.push_back({std::move(name), t.shape(), {t.data().begin(), t.data().end()}});
  }
};

namespace detail {

template <class T>
void put_le(std::string& out, T v) {
  static_assert(std::is_trivially_copyable_v<T>);
  std::array<char, sizeof(T)> bytes;
  std::memcpy(bytes.data(), &v, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
  out.append(bytes.data(), sizeof(T));
}

class Reader {
 public:
  explicit Reader(const std::string& buf) : buf_(buf) {}
  template <class T>
  T get() {
    need(sizeof(T));
    std::array<char, sizeof(T)> bytes;
    std::memcpy(bytes.data(), buf_.data() + pos_, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
    pos_ += sizeof(T);
    T v;
    std::memcpy(&v, bytes.data(), sizeof(T));
    return v;
  }
  std::string bytes(std::size_t n) {
    need(n);
    std::string s = buf_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == buf_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > buf_.size()) throw SnapshotError("snapshot: truncated data");
  }
  const std::string& buf_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string encode_snapshot(const Snapshot& snap) {
  std::string out(kSnapshotMagic.begin(), kSnapshotMagic.end());
  detail::put_le<std::uint32_t>(out, kSnapshotVersion);
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(snap.kind));
  const std::string header = snap.header.dump();
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(header.size()));
  out += header;
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(snap.tensors.size()));
  for (const auto& t : snap.tensors) {
    if (shape_size(t.shape) != t.data.size()) throw SnapshotError("snapshot: tensor '" + t.name + "' shape/data mismatch");
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.name.size()));
    out += t.name;
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.shape.size()));
    for (auto d : t.shape) detail::put_le<std::uint64_t>(out, d);
    for (double v : t.data) detail::put_le<double>(out, v);
  }
  return out;
}

inline Snapshot decode_snapshot(const std::string& buf) {
  detail::Reader in(buf);
  const std::string magic = in.bytes(kSnapshotMagic.size());
  if (magic != std::string(kSnapshotMagic.begin(), kSnapshotMagic.end())) throw SnapshotError("snapshot: bad magic");
  const auto version = in.get<std::uint32_t>();
  if (version != kSnapshotVersion) throw SnapshotError("snapshot: unsupported version " + std::to_string(version));
  Snapshot snap;
  const auto kind = in.get<std::uint32_t>();
  if (kind < 1 || kind > 4) throw SnapshotError("snapshot: unknown kind tag " + std::to_string(kind));
  snap.kind = static_cast<SnapshotKind>(kind);
  const auto hlen = in.get<std::uint32_t>();
  try {
    snap.header = nlohmann::json::parse(in.bytes(hlen));
  } catch (const nlohmann::json::exception& e) {
    throw SnapshotError(std::string("snapshot: malformed header: ") + e.what());
  }
  const auto count = in.get<std::uint32_t>();
  for (std::uint32_t k = 0; k < count; ++k) {
    NamedTensor t;
    t.name = in.bytes(in.get<std::uint32_t>());
    const auto rank = in.get<std::uint32_t>();
    for (std::uint32_t r = 0; r < rank; ++r) t.shape.push_back(static_cast<std::size_t>(in.get<std::uint64_t>()));
    const std::size_t n = shape_size(t.shape);
    t.data.resize(n);
    for (auto& v : t.data) v = in.get<double>();
    snap.tensors.push_back(std::move(t));
  }
  if (!in.done()) throw SnapshotError("snapshot: trailing bytes");
  return snap;
}

inline void save_snapshot(const std::string& path, const Snapshot& snap) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw SnapshotError("snapshot: cannot open '" + path + "' for writing");
  const auto bytes = encode_snapshot(snap);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw SnapshotError("snapshot: write failed for '" + path + "'");
}

inline Snapshot load_snapshot(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw SnapshotError("snapshot: cannot open '" + path + "'");
  std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode_snapshot(buf);
}

/// FNV-1a over the raw bytes of every value; used to prove frozen weights stay untouched.
inline std::uint64_t checksum(const std::vector<const Tensor*>& tensors) {
  std::uint64_t h = 1469598103934665603ull;
  for (const auto* t : tensors) {
    for (double v : t->data()) {
      std::uint64_t bits = std::bit_cast<std::uint64_t>(v);
      for (int b = 0; b < 8; ++b) {
        h ^= (bits >> (8 * b)) & 0xffu;
        h *= 1099511628211ull;
      }
    }
  }
  return h;
}

}  // namespace sbreg
