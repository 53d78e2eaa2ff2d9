#pragma once

// Binary checkpoint container, little-endian throughout:
//
//   "IEAC"                      4 magic bytes
//   version                     u32
//   config length, config text  u64 + UTF-8 (ModelConfig::to_text)
//   then per tensor until EOF:
//     name length, name         u64 + bytes
//     rank, dims                u64 + rank x u64
//     data                      f64 x product(dims)

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>
#include <string>
#include <vector>

#include "iea/model.hpp"

namespace iea {

inline constexpr char kCheckpointMagic[4] = {'I', 'E', 'A', 'C'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

class ByteWriter {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* c = static_cast<const unsigned char*>(p);
    buf_.insert(buf_.end(), c, c + n);
  }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xFF));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xFF));
  }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void str(const std::string& s) {
    u64(s.size());
    bytes(s.data(), s.size());
  }
  const std::vector<unsigned char>& buffer() const { return buf_; }

 private:
  std::vector<unsigned char> buf_;
};

class ByteReader {
 public:
  ByteReader(const std::vector<unsigned char>& b, std::string path) : b_(b), path_(std::move(path)) {}

  bool at_end() const { return pos_ == b_.size(); }
  void need(std::size_t n, const char* what) const {
    if (b_.size() - pos_ < n)
      throw CheckpointTruncatedError(path_ + ": truncated while reading " + what + " at byte " + std::to_string(pos_));
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t{b_[pos_++]} << (8 * i);
    return v;
  }
  std::uint64_t u64(const char* what) {
    need(8, what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t{b_[pos_++]} << (8 * i);
    return v;
  }
  double f64(const char* what) { return std::bit_cast<double>(u64(what)); }
  std::string str(const char* what) {
    const std::uint64_t n = u64(what);
    need(n, what);
    std::string s(reinterpret_cast<const char*>(b_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  void raw(void* dst, std::size_t n, const char* what) {
    need(n, what);
    std::memcpy(dst, b_.data() + pos_, n);
    pos_ += n;
  }

 private:
  const std::vector<unsigned char>& b_;
  std::string path_;
  std::size_t pos_ = 0;
};

inline std::vector<unsigned char> read_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path);
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

}  // namespace detail

inline std::vector<unsigned char> serialize_checkpoint(Model& model) {
  detail::ByteWriter w;
  w.bytes(kCheckpointMagic, 4);
  w.u32(kCheckpointVersion);
  w.str(model.config().to_text());
  for (const auto& s : model.state()) {
    w.str(s.name);
    w.u64(s.value->rank());
    for (auto d : s.value->shape()) w.u64(d);
    for (double v : s.value->data()) w.f64(v);
  }
  return w.buffer();
}

inline void save_checkpoint(Model& model, const std::string& path) {
  const auto bytes = serialize_checkpoint(model);
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot write " + path);
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw IoError("short write to " + path);
}

namespace detail {

struct RawCheckpoint {
  ModelConfig config;
  std::map<std::string, Tensor> tensors;
};

inline RawCheckpoint decode_checkpoint(const std::vector<unsigned char>& bytes, const std::string& path) {
  ByteReader r(bytes, path);
  char magic[4];
  r.raw(magic, 4, "magic");
  if (std::memcmp(magic, kCheckpointMagic, 4) != 0) throw CheckpointError(path + ": not a checkpoint (bad magic)");
  const std::uint32_t version = r.u32("version");
  if (version != kCheckpointVersion)
    throw CheckpointVersionError(path + ": unsupported checkpoint version " + std::to_string(version) + " (expected " +
                                 std::to_string(kCheckpointVersion) + ")");
  RawCheckpoint out;
  const std::string text = r.str("config");
  try {
    out.config = ModelConfig::from_text(text);
  } catch (const ConfigError& e) {
    throw CheckpointError(path + ": invalid embedded config: " + e.what());
  }
  while (!r.at_end()) {
    std::string name = r.str("tensor name");
    const std::uint64_t rank = r.u64("tensor rank");
    if (rank == 0 || rank > 8) throw CheckpointError(path + ": implausible rank " + std::to_string(rank) + " for " + name);
    Shape shape(rank);
    std::uint64_t count = 1;
    for (auto& d : shape) {
      d = r.u64("tensor dims");
      if (d == 0) throw CheckpointError(path + ": zero extent in " + name);
      count *= d;
    }
    if (count > (std::uint64_t{1} << 40)) throw CheckpointError(path + ": implausible size for " + name);
    r.need(count * 8, "tensor data");
    std::vector<double> data(count);
    for (auto& v : data) v = r.f64("tensor data");
    out.tensors.emplace(std::move(name), Tensor(std::move(shape), std::move(data)));
  }
  return out;
}

inline void fill_model(Model& model, std::map<std::string, Tensor>& tensors, const std::string& path) {
  auto state = model.state();
  for (const auto& s : state) {
    auto it = tensors.find(s.name);
    if (it == tensors.end()) throw CheckpointTruncatedError(path + ": tensor '" + s.name + "' is missing");
    if (it->second.shape() != s.value->shape())
      throw CheckpointShapeError(path + ": shape mismatch for '" + s.name + "': file has " + shape_str(it->second.shape()) +
                                 ", model expects " + shape_str(s.value->shape()));
  }
  if (tensors.size() != state.size()) {
    for (const auto& [name, t] : tensors) {
      bool known = false;
      for (const auto& s : state) known = known || s.name == name;
      if (!known) throw CheckpointShapeError(path + ": tensor '" + name + "' has no counterpart in the model");
    }
  }
  for (const auto& s : state) *s.value = std::move(tensors.at(s.name));
}

}  // namespace detail

// Rebuilds the model from the embedded config and restores every tensor.
inline Model load_checkpoint(const std::string& path) {
  auto raw = detail::decode_checkpoint(detail::read_file(path), path);
  Model model(raw.config);
  detail::fill_model(model, raw.tensors, path);
  model.set_mode(Mode::kEval);
  return model;
}

// Loads the tensors into a model built from `expected`; any tensor whose
// shape differs is a CheckpointShapeError.
inline Model load_checkpoint(const std::string& path, const ModelConfig& expected) {
  auto raw = detail::decode_checkpoint(detail::read_file(path), path);
  Model model(expected);
  detail::fill_model(model, raw.tensors, path);
  model.set_mode(Mode::kEval);
  return model;
}

}  // namespace iea
