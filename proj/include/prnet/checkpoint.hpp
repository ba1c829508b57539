// Tensor container file: 8-byte magic, u64 little-endian header length, a
// JSON header, then raw little-endian float64 payloads.
#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "prnet/config.hpp"

namespace prnet {

inline constexpr char kCheckpointMagic[8] = {'P', 'R', 'N', 'E', 'T', 'C', 'K', '1'};
inline constexpr int kCheckpointFormatVersion = 1;

struct Checkpoint {
  /// Free-form header fields (config echo, epoch, ...).
  json meta = json::object();
  std::vector<std::pair<std::string, Tensor>> tensors;

  [[nodiscard]] const Tensor* find(const std::string& name) const {
    for (const auto& [n, t] : tensors)
      if (n == name) return &t;
    return nullptr;
  }
};

namespace detail {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

inline std::uint64_t to_le(std::uint64_t v) {
  if constexpr (std::endian::native == std::endian::little) return v;
  std::uint64_t r = 0;
  for (int i = 0; i < 8; ++i) r |= ((v >> (8 * i)) & 0xffu) << (8 * (7 - i));
  return r;
}

inline void put_u64(std::string& out, std::uint64_t v) {
  v = to_le(v);
  char b[8];
  std::memcpy(b, &v, 8);
  out.append(b, 8);
}

inline std::uint64_t get_u64(const char* p) {
  std::uint64_t v;
  std::memcpy(&v, p, 8);
  return to_le(v);
}

}  // namespace detail

inline std::string serialize_checkpoint(const Checkpoint& ck) {
  json header;
  header["format_version"] = kCheckpointFormatVersion;
  header["meta"] = ck.meta;
  json entries = json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, t] : ck.tensors) {
    entries.push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}});
    offset += 8 * t.numel();
  }
  header["tensors"] = std::move(entries);
  const std::string hs = header.dump();
  std::string out(kCheckpointMagic, 8);
  detail::put_u64(out, hs.size());
  out += hs;
  out.reserve(out.size() + offset);
  for (const auto& [name, t] : ck.tensors)
    for (double v : t.values()) detail::put_u64(out, std::bit_cast<std::uint64_t>(v));
  return out;
}

inline Checkpoint deserialize_checkpoint(const std::string& bytes) {
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0)
    throw DataError("checkpoint: bad magic");
  const std::uint64_t hlen = detail::get_u64(bytes.data() + 8);
  if (hlen > bytes.size() - 16) throw DataError("checkpoint: truncated header");
  json header;
  try {
    header = json::parse(bytes.substr(16, hlen));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("checkpoint: header: ") + e.what());
  }
  if (header.value("format_version", -1) != kCheckpointFormatVersion)
    throw DataError("checkpoint: unsupported format version");
  Checkpoint ck;
  ck.meta = header.value("meta", json::object());
  const std::size_t base = 16 + hlen;
  for (const auto& e : header.at("tensors")) {
    const auto shape = e.at("shape").get<ad::Shape>();
    const auto offset = e.at("offset").get<std::uint64_t>();
    const std::size_t n = ad::numel_of(shape);
    if (offset + 8 * n > bytes.size() - base) throw DataError("checkpoint: truncated payload");
    std::vector<double> data(n);
    for (std::size_t i = 0; i < n; ++i)
      data[i] = std::bit_cast<double>(detail::get_u64(bytes.data() + base + offset + 8 * i));
    ck.tensors.emplace_back(e.at("name").get<std::string>(), Tensor(shape, std::move(data)));
  }
  return ck;
}

inline void write_checkpoint(const std::string& path, const Checkpoint& ck) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write checkpoint '" + path + "'");
  const std::string bytes = serialize_checkpoint(ck);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("failed writing checkpoint '" + path + "'");
}

inline Checkpoint read_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint '" + path + "'");
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint(bytes);
}

/// Model parameters plus config echo as a checkpoint.
inline Checkpoint model_checkpoint(const ModelParams& params) {
  Checkpoint ck;
  ck.meta["model"] = to_json(params.config);
  for (auto& [name, t] : params.named()) ck.tensors.emplace_back(name, t.detach());
  return ck;
}

/// Rebuilds parameters from the config echo and tensors in `ck`.
inline ModelParams model_from_checkpoint(const Checkpoint& ck) {
  if (!ck.meta.contains("model")) throw DataError("checkpoint: missing model config");
  ModelConfig cfg;
  try {
    from_json(ck.meta.at("model"), cfg);
  } catch (const ConfigError& e) {
    throw DataError(std::string("checkpoint: ") + e.what());
  }
  ModelParams p = init_model(cfg, Rng(0));
  p.for_each([&](const std::string& name, Tensor& t) {
    const Tensor* src = ck.find(name);
    if (!src) throw DataError("checkpoint: missing tensor '" + name + "'");
    if (src->shape() != t.shape()) throw DataError("checkpoint: shape mismatch for '" + name + "'");
    std::copy(src->values().begin(), src->values().end(), t.data().begin());
  });
  return p;
}

}  // namespace prnet
