#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include "dwstrack/common.hpp"
#include "dwstrack/config.hpp"
#include "dwstrack/model.hpp"

namespace dwstrack {

inline constexpr char kCheckpointMagic[8] = {'D', 'W', 'S', 'T', 'C', 'K', 'P', 'T'};
inline constexpr uint32_t kCheckpointVersion = 1;

struct CheckpointBlob {
  std::string name;
  Shape shape;
  std::vector<float> data;
};

/// On-disk training state: format version, model config as structured text,
/// named little-endian float32 parameter buffers, state buffers (batch-norm
/// running stats), and optimizer moments under the same naming scheme.
struct Checkpoint {
  uint32_t version = kCheckpointVersion;
  KeyValue config;  // model.* keys
  KeyValue meta;    // epoch, optimizer scalars, schedule state, norm stats
  std::vector<CheckpointBlob> params;
  std::vector<CheckpointBlob> buffers;
  std::vector<CheckpointBlob> opt;

  const CheckpointBlob* find(const std::vector<CheckpointBlob>& list, const std::string& name) const {
    for (const auto& b : list)
      if (b.name == name) return &b;
    return nullptr;
  }
};

namespace detail {

inline void write_u32(std::ostream& os, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline void write_u64(std::ostream& os, uint64_t v) {
  write_u32(os, static_cast<uint32_t>(v));
  write_u32(os, static_cast<uint32_t>(v >> 32));
}

inline void write_f32(std::ostream& os, float f) { write_u32(os, std::bit_cast<uint32_t>(f)); }

inline uint32_t read_u32(std::istream& is, const std::string& path) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) throw ParseError(path + ": truncated checkpoint");
  return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
         (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

inline uint64_t read_u64(std::istream& is, const std::string& path) {
  uint64_t lo = read_u32(is, path);
  uint64_t hi = read_u32(is, path);
  return lo | (hi << 32);
}

inline void write_string(std::ostream& os, const std::string& s) {
  write_u32(os, static_cast<uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string read_string(std::istream& is, const std::string& path) {
  uint32_t n = read_u32(is, path);
  std::string s(n, '\0');
  if (n && !is.read(s.data(), n)) throw ParseError(path + ": truncated checkpoint");
  return s;
}

inline void write_blob_list(std::ostream& os, const std::vector<CheckpointBlob>& list) {
  write_u64(os, list.size());
  for (const auto& b : list) {
    write_string(os, b.name);
    write_u32(os, static_cast<uint32_t>(b.shape.size()));
    for (int64_t d : b.shape) write_u64(os, static_cast<uint64_t>(d));
    for (float f : b.data) write_f32(os, f);
  }
}

inline std::vector<CheckpointBlob> read_blob_list(std::istream& is, const std::string& path) {
  uint64_t n = read_u64(is, path);
  std::vector<CheckpointBlob> list;
  list.reserve(n);
  for (uint64_t i = 0; i < n; ++i) {
    CheckpointBlob b;
    b.name = read_string(is, path);
    uint32_t ndim = read_u32(is, path);
    b.shape.resize(ndim);
    int64_t numel = 1;
    for (uint32_t d = 0; d < ndim; ++d) {
      b.shape[d] = static_cast<int64_t>(read_u64(is, path));
      numel *= b.shape[d];
    }
    b.data.resize(static_cast<size_t>(numel));
    for (auto& f : b.data) f = std::bit_cast<float>(read_u32(is, path));
    list.push_back(std::move(b));
  }
  return list;
}

}  // namespace detail

inline void write_checkpoint(const Checkpoint& ck, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write checkpoint: " + path);
  os.write(kCheckpointMagic, 8);
  detail::write_u32(os, ck.version);
  detail::write_string(os, ck.config.serialize());
  detail::write_string(os, ck.meta.serialize());
  detail::write_blob_list(os, ck.params);
  detail::write_blob_list(os, ck.buffers);
  detail::write_blob_list(os, ck.opt);
  if (!os) throw IoError("checkpoint write failed: " + path);
}

inline Checkpoint read_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint: " + path);
  char magic[8];
  if (!is.read(magic, 8) || std::memcmp(magic, kCheckpointMagic, 8) != 0)
    throw ParseError(path + ": not a dwstrack checkpoint (bad magic)");
  Checkpoint ck;
  ck.version = detail::read_u32(is, path);
  if (ck.version != kCheckpointVersion)
    throw ParseError(path + ": checkpoint format version " + std::to_string(ck.version) +
                     " is not supported by this build (expected " +
                     std::to_string(kCheckpointVersion) + ")");
  ck.config = KeyValue::parse(detail::read_string(is, path), path + "#config");
  ck.meta = KeyValue::parse(detail::read_string(is, path), path + "#meta");
  ck.params = detail::read_blob_list(is, path);
  ck.buffers = detail::read_blob_list(is, path);
  ck.opt = detail::read_blob_list(is, path);
  return ck;
}

/// Captures the model's parameters and state buffers. Optimizer blobs and
/// meta are filled by the training loop.
inline Checkpoint snapshot_model(const DwsformerModelT<float>& model) {
  Checkpoint ck;
  model.config().to_kv(ck.config);
  for (const auto& p : model.params().params)
    ck.params.push_back({p.first, p.second.shape(), p.second.values()});
  for (const auto& b : model.params().buffers)
    ck.buffers.push_back({b.name, {static_cast<int64_t>(b.data->size())}, *b.data});
  return ck;
}

/// Fills an existing model (built from the same config) from a checkpoint.
inline void load_into_model(const Checkpoint& ck, DwsformerModelT<float>& model) {
  auto& reg = model.params();
  if (ck.params.size() != reg.params.size())
    throw StateError("checkpoint carries " + std::to_string(ck.params.size()) +
                     " parameters but the model has " + std::to_string(reg.params.size()) +
                     "; config mismatch");
  for (auto& p : reg.params) {
    const CheckpointBlob* b = ck.find(ck.params, p.first);
    if (!b) throw StateError("checkpoint is missing parameter '" + p.first + "'");
    if (b->shape != p.second.shape())
      throw StateError("checkpoint parameter '" + p.first + "' has shape " + shape_to_string(b->shape) +
                       ", model expects " + shape_to_string(p.second.shape()));
    p.second.mutable_values() = b->data;
    p.second.zero_grad();
  }
  for (auto& buf : reg.buffers) {
    const CheckpointBlob* b = ck.find(ck.buffers, buf.name);
    if (!b) throw StateError("checkpoint is missing buffer '" + buf.name + "'");
    if (b->data.size() != buf.data->size())
      throw StateError("checkpoint buffer '" + buf.name + "' has wrong size");
    *buf.data = b->data;
    if (buf.loaded_flag) *buf.loaded_flag = true;
  }
}

/// Builds a model directly from a checkpoint's embedded config.
inline std::unique_ptr<DwsformerModelT<float>> model_from_checkpoint(const Checkpoint& ck) {
  ModelConfig cfg = ModelConfig::from_kv(ck.config);
  auto model = std::make_unique<DwsformerModelT<float>>(cfg, 0);
  load_into_model(ck, *model);
  return model;
}

}  // namespace dwstrack
