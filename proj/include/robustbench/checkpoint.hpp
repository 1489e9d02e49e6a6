#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <string_view>

#include "robustbench/io.hpp"
#include "robustbench/models.hpp"
#include "robustbench/tensor.hpp"

namespace robustbench {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Stored model: architecture text (sorted key=value lines), tensors and the
/// PRNG state at the end of training.
struct Checkpoint {
  std::string config_text;
  ParamSet<float> params;
  std::array<std::uint64_t, 4> rng_state{};

  bool operator==(const Checkpoint&) const = default;
};

inline constexpr std::string_view kCheckpointMagic{"RBCKPT\0\0", 8};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

enum class TensorRole : std::uint8_t { parameter = 0, mask = 1, buffer = 2 };

class ByteWriter {
 public:
  void u8(std::uint8_t v) { out_.push_back(static_cast<char>(v)); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void bytes(std::string_view s) { out_.append(s); }
  void text(std::string_view s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes(s);
  }
  const std::string& str() const { return out_; }

 private:
  std::string out_;
};

class ByteReader {
 public:
  explicit ByteReader(std::string_view data) : data_(data) {}

  std::uint8_t u8() {
    need(1);
    return static_cast<std::uint8_t>(data_[pos_++]);
  }
  std::uint32_t u32() {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t{u8()} << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t{u8()} << (8 * i);
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  std::string bytes(std::size_t n) {
    need(n);
    std::string s(data_.substr(pos_, n));
    pos_ += n;
    return s;
  }
  std::string text() { return bytes(u32()); }
  bool done() const { return pos_ == data_.size(); }

 private:
  void need(std::size_t n) const {
    if (data_.size() - pos_ < n) throw CheckpointError("checkpoint: truncated file");
  }

  std::string_view data_;
  std::size_t pos_ = 0;
};

inline void write_tensor(ByteWriter& w, TensorRole role, const std::string& name, const Tensor<float>& t) {
  w.u8(static_cast<std::uint8_t>(role));
  w.text(name);
  w.u32(static_cast<std::uint32_t>(t.rank()));
  for (std::size_t d : t.shape()) w.u64(d);
  for (float v : t.data()) w.f32(v);
}

}  // namespace detail

/// Byte-stable encoding: little-endian integers and IEEE-754 floats, tensors
/// in name order grouped by role.
inline std::string encode_checkpoint(const Checkpoint& ck) {
  using detail::TensorRole;
  detail::ByteWriter w;
  w.bytes(kCheckpointMagic);
  w.u32(kCheckpointVersion);
  w.text(ck.config_text);
  const auto& p = ck.params;
  w.u32(static_cast<std::uint32_t>(p.tensors.size() + p.masks.size() + p.buffers.size()));
  for (const auto& [k, t] : p.tensors) detail::write_tensor(w, TensorRole::parameter, k, t);
  for (const auto& [k, t] : p.masks) detail::write_tensor(w, TensorRole::mask, k, t);
  for (const auto& [k, t] : p.buffers) detail::write_tensor(w, TensorRole::buffer, k, t);
  for (std::uint64_t s : ck.rng_state) w.u64(s);
  return w.str();
}

inline Checkpoint decode_checkpoint(std::string_view bytes) {
  detail::ByteReader r(bytes);
  if (r.bytes(kCheckpointMagic.size()) != kCheckpointMagic) throw CheckpointError("checkpoint: bad magic");
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw CheckpointError("checkpoint: unsupported version " + std::to_string(version));
  }
  Checkpoint ck;
  ck.config_text = r.text();
  const std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto role = static_cast<detail::TensorRole>(r.u8());
    const std::string name = r.text();
    const std::uint32_t rank = r.u32();
    if (rank > 8) throw CheckpointError("checkpoint: implausible rank for " + name);
    Shape shape(rank);
    for (auto& d : shape) d = r.u64();
    const std::size_t n = shape_size(shape);
    if (n > bytes.size() / 4) throw CheckpointError("checkpoint: tensor " + name + " exceeds file size");
    std::vector<float> data(n);
    for (auto& v : data) v = r.f32();
    Tensor<float> t(std::move(shape), std::move(data));
    switch (role) {
      case detail::TensorRole::parameter: ck.params.tensors[name] = std::move(t); break;
      case detail::TensorRole::mask: ck.params.masks[name] = std::move(t); break;
      case detail::TensorRole::buffer: ck.params.buffers[name] = std::move(t); break;
      default: throw CheckpointError("checkpoint: unknown tensor role for " + name);
    }
  }
  for (auto& s : ck.rng_state) s = r.u64();
  if (!r.done()) throw CheckpointError("checkpoint: trailing bytes");
  return ck;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  write_file(path, encode_checkpoint(ck));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::string bytes;
  try {
    bytes = read_text_file(path);
  } catch (const std::runtime_error& e) {
    throw CheckpointError(e.what());
  }
  return decode_checkpoint(bytes);
}

}  // namespace robustbench
