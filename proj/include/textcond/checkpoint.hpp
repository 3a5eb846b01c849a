#pragma once

#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "textcond/backbone.hpp"
#include "textcond/image_io.hpp"
#include "textcond/inference.hpp"
#include "textcond/train_config.hpp"

namespace textcond {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Layout (little-endian):
//   "TCKP" | u32 version | u32 len | metadata JSON {config, normalization}
//   | u32 count | count x (u32 name_len | name | u32 ndim | ndim x u32 dim | f32 data)
// Tensors cover parameters and buffers (BN running statistics) by name.
inline constexpr char kCheckpointMagic[4] = {'T', 'C', 'K', 'P'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct ModelBundle {
  TrainConfig config;
  Normalization norm;
  std::unique_ptr<Network<float>> net;
  std::string model_id;
};

namespace detail {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
  out.insert(out.end(), p, p + 4);
}

class ByteReader {
 public:
  explicit ByteReader(const std::vector<std::uint8_t>& b) : b_(b) {}
  void read(void* dst, std::size_t n) {
    if (pos_ + n > b_.size()) throw CheckpointError("checkpoint truncated");
    std::memcpy(dst, b_.data() + pos_, n);
    pos_ += n;
  }
  std::uint32_t u32() {
    std::uint32_t v;
    read(&v, 4);
    return v;
  }
  std::string str(std::size_t n) {
    std::string s(n, '\0');
    read(s.data(), n);
    return s;
  }
  bool done() const { return pos_ == b_.size(); }

 private:
  const std::vector<std::uint8_t>& b_;
  std::size_t pos_ = 0;
};

}  // namespace detail

/// Stable identifier derived from the checkpoint bytes (FNV-1a 64).
inline std::string model_id_of(const std::vector<std::uint8_t>& bytes) {
  std::uint64_t h = 1469598103934665603ULL;
  for (std::uint8_t b : bytes) {
    h ^= b;
    h *= 1099511628211ULL;
  }
  char buf[24];
  std::snprintf(buf, sizeof buf, "tc-%016llx", static_cast<unsigned long long>(h));
  return buf;
}

inline std::vector<std::uint8_t> serialize_checkpoint(Network<float>& net, const TrainConfig& cfg,
                                                      const Normalization& norm) {
  std::vector<std::uint8_t> out(kCheckpointMagic, kCheckpointMagic + 4);
  detail::put_u32(out, kCheckpointVersion);
  const std::string meta = nlohmann::json{{"config", cfg}, {"normalization", norm}}.dump();
  detail::put_u32(out, static_cast<std::uint32_t>(meta.size()));
  out.insert(out.end(), meta.begin(), meta.end());
  const auto ps = net.parameters();
  detail::put_u32(out, static_cast<std::uint32_t>(ps.entries().size()));
  for (const auto& e : ps.entries()) {
    const Tensor<float>& t = e.param ? e.param->value : *e.buffer;
    detail::put_u32(out, static_cast<std::uint32_t>(e.name.size()));
    out.insert(out.end(), e.name.begin(), e.name.end());
    detail::put_u32(out, 4);
    for (int d : t.shape()) detail::put_u32(out, static_cast<std::uint32_t>(d));
    const auto* p = reinterpret_cast<const std::uint8_t*>(t.data());
    out.insert(out.end(), p, p + t.size() * sizeof(float));
  }
  return out;
}

inline void save_checkpoint(const std::string& path, Network<float>& net, const TrainConfig& cfg,
                            const Normalization& norm) {
  const auto bytes = serialize_checkpoint(net, cfg, norm);
  std::ofstream f(path, std::ios::binary);
  if (!f || !f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size())))
    throw CheckpointError("cannot write checkpoint '" + path + "'");
}

/// Rebuilds the network from the stored config; every tensor must be present
/// with its exact shape, and no unknown tensors are accepted.
inline ModelBundle deserialize_checkpoint(const std::vector<std::uint8_t>& bytes) {
  detail::ByteReader r(bytes);
  char magic[4];
  r.read(magic, 4);
  if (std::memcmp(magic, kCheckpointMagic, 4) != 0) throw CheckpointError("not a checkpoint (bad magic)");
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  ModelBundle b;
  try {
    const auto meta = nlohmann::json::parse(r.str(r.u32()));
    b.config = config_from_json(meta.at("config"));
    b.norm = meta.at("normalization").get<Normalization>();
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("checkpoint metadata: ") + e.what());
  }
  std::map<std::string, Tensor<float>> stored;
  const std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = r.str(r.u32());
    if (r.u32() != 4) throw CheckpointError("tensor '" + name + "' is not 4-D");
    std::array<int, 4> dims{};
    for (auto& d : dims) d = static_cast<int>(r.u32());
    Tensor<float> t(dims[0], dims[1], dims[2], dims[3]);
    r.read(t.data(), t.size() * sizeof(float));
    stored.emplace(std::move(name), std::move(t));
  }
  if (!r.done()) throw CheckpointError("trailing bytes after checkpoint tensors");
  b.net = std::make_unique<Network<float>>(b.config.net, b.config.seed);
  const auto ps = b.net->parameters();
  for (const auto& e : ps.entries()) {
    auto it = stored.find(e.name);
    if (it == stored.end()) throw CheckpointError("checkpoint is missing tensor '" + e.name + "'");
    Tensor<float>& dst = e.param ? e.param->value : *e.buffer;
    if (!dst.same_shape(it->second))
      throw CheckpointError("tensor '" + e.name + "' has shape " + it->second.shape_string() + ", expected " +
                            dst.shape_string());
    dst = std::move(it->second);
    stored.erase(it);
  }
  if (!stored.empty()) throw CheckpointError("checkpoint has unexpected tensor '" + stored.begin()->first + "'");
  b.model_id = model_id_of(bytes);
  return b;
}

inline ModelBundle load_checkpoint(const std::string& path) {
  try {
    return deserialize_checkpoint(read_file_bytes(path));
  } catch (const ImageError& e) {
    throw CheckpointError(e.what());
  }
}

}  // namespace textcond
