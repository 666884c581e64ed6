#pragma once

// Binary checkpoint container (little-endian):
//   "GBTCKPT\0" | u32 version | u32 meta_len | meta JSON | u32 count |
//   count x { u32 name_len | name | u32 ndim | u64 dims[ndim] | f64 data[numel] }
// See docs/checkpoint_format.md.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "gbt/config.hpp"

namespace gbt {

inline constexpr char kCheckpointMagic[8] = {'G', 'B', 'T', 'C', 'K', 'P', 'T', '\0'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointEntry {
  std::string name;
  Shape shape;
  std::vector<double> values;
};

struct Checkpoint {
  Json meta;
  std::vector<CheckpointEntry> entries;

  const CheckpointEntry* find(const std::string& name) const {
    for (const auto& e : entries)
      if (e.name == name) return &e;
    return nullptr;
  }
};

namespace detail {

template <typename T>
void put_le(std::string& out, T v) {
  std::uint64_t bits = 0;
  std::memcpy(&bits, &v, sizeof(T));
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

class ByteReader {
 public:
  ByteReader(const std::string& bytes, std::string source) : b_(bytes), src_(std::move(source)) {}
  template <typename T>
  T get() {
    need(sizeof(T));
    std::uint64_t bits = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) bits |= std::uint64_t{static_cast<unsigned char>(b_[pos_ + i])} << (8 * i);
    pos_ += sizeof(T);
    T v;
    std::memcpy(&v, &bits, sizeof(T));
    return v;
  }
  std::string bytes(std::size_t n) {
    need(n);
    std::string s = b_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == b_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > b_.size()) {
      throw DataError(src_ + ": truncated checkpoint at byte " + std::to_string(pos_) + " (need " + std::to_string(n) +
                      " more)");
    }
  }
  const std::string& b_;
  std::string src_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string encode_checkpoint(const ParameterSet& params, const Json& meta) {
  std::string out(kCheckpointMagic, sizeof kCheckpointMagic);
  detail::put_le<std::uint32_t>(out, kCheckpointVersion);
  const std::string m = meta.dump();
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(m.size()));
  out += m;
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(params.size()));
  for (const auto& [name, t] : params.entries()) {
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) detail::put_le<std::uint64_t>(out, d);
    for (double v : t.values()) detail::put_le<double>(out, v);
  }
  return out;
}

inline Checkpoint decode_checkpoint(const std::string& bytes, const std::string& source = "<checkpoint>") {
  detail::ByteReader r(bytes, source);
  if (r.bytes(sizeof kCheckpointMagic) != std::string(kCheckpointMagic, sizeof kCheckpointMagic)) {
    throw DataError(source + ": not a GBT checkpoint (bad magic)");
  }
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw DataError(source + ": checkpoint version " + std::to_string(version) + " unsupported (expected " +
                    std::to_string(kCheckpointVersion) + ")");
  }
  Checkpoint ck;
  const auto meta_len = r.get<std::uint32_t>();
  try {
    ck.meta = Json::parse(r.bytes(meta_len));
  } catch (const nlohmann::json::parse_error&) {
    throw DataError(source + ": corrupt checkpoint metadata");
  }
  const auto count = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    CheckpointEntry e;
    e.name = r.bytes(r.get<std::uint32_t>());
    const auto ndim = r.get<std::uint32_t>();
    for (std::uint32_t d = 0; d < ndim; ++d) e.shape.push_back(static_cast<std::size_t>(r.get<std::uint64_t>()));
    e.values.resize(shape_numel(e.shape));
    for (double& v : e.values) v = r.get<double>();
    ck.entries.push_back(std::move(e));
  }
  if (!r.done()) throw DataError(source + ": trailing bytes after checkpoint entries");
  return ck;
}

inline void save_checkpoint(const std::string& path, const ParameterSet& params, const Json& meta) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write checkpoint " + path);
  const std::string bytes = encode_checkpoint(params, meta);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("failed writing checkpoint " + path);
}

inline Checkpoint read_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path);
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes, path);
}

/// Copies stored values into `params` (names taken as `prefix + name`).
/// Every parameter must be present with an identical shape.
inline void load_parameters(const Checkpoint& ck, ParameterSet& params, const std::string& prefix = "") {
  for (const auto& [name, t] : params.entries()) {
    const CheckpointEntry* e = ck.find(prefix + name);
    if (e == nullptr) throw DimensionError("checkpoint lacks parameter " + prefix + name);
    if (e->shape != t.shape()) {
      throw DimensionError("checkpoint parameter " + prefix + name + " has shape " + shape_str(e->shape) +
                           ", model expects " + shape_str(t.shape()));
    }
    Tensor dst = t;
    std::copy(e->values.begin(), e->values.end(), dst.mutable_values().begin());
  }
}

}  // namespace gbt
