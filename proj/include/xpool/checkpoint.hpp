#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <map>
#include <string>
#include <utility>

#include "xpool/corpus.hpp"
#include "xpool/errors.hpp"
#include "xpool/io.hpp"
#include "xpool/objective.hpp"
#include "xpool/pooling.hpp"

namespace xpool {

inline constexpr char kCheckpointMagic[] = "XPC1";
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  XPoolHead<float> head;
  LogitScale<float> scale;
};

/// XPC1 layout (little-endian): magic, u32 version, u32 D, u32 D_p,
/// f32 dropout_rate, f32 log_lambda, then one (u16 name_length, name,
/// u32 rows, u32 cols, f32 payload) block per tensor until end of file.
inline std::vector<char> encode_checkpoint(const XPoolHead<float>& head, const LogitScale<float>& scale) {
  head.validate();
  ByteWriter w;
  w.bytes(kCheckpointMagic);
  w.le<std::uint32_t>(kCheckpointVersion);
  w.le<std::uint32_t>(static_cast<std::uint32_t>(head.dim));
  w.le<std::uint32_t>(static_cast<std::uint32_t>(head.proj_dim));
  w.f32(static_cast<float>(head.dropout_rate));
  w.f32(scale.log_lambda);
  head.for_each_tensor([&](std::string_view name, const Matrix<float>& m, bool) {
    w.le<std::uint16_t>(static_cast<std::uint16_t>(name.size()));
    w.bytes(name);
    w.le<std::uint32_t>(static_cast<std::uint32_t>(m.rows()));
    w.le<std::uint32_t>(static_cast<std::uint32_t>(m.cols()));
    for (float v : m.values()) w.f32(v);
  });
  return w.buffer();
}

inline Checkpoint decode_checkpoint(std::vector<char> bytes, const std::string& source = "<memory>") {
  ByteReader in(std::move(bytes));
  if (in.bytes(4, "magic") != kCheckpointMagic) throw FormatError(source + ": bad magic (expected XPC1)");
  const auto version = in.le<std::uint32_t>("version");
  if (version != kCheckpointVersion) throw FormatError(source + ": unsupported checkpoint version " + std::to_string(version));
  Checkpoint ck;
  ck.head.dim = in.le<std::uint32_t>("D");
  ck.head.proj_dim = in.le<std::uint32_t>("D_p");
  // Stored as f32; widening keeps the exact float so re-saving is bit-identical.
  ck.head.dropout_rate = static_cast<double>(in.f32("dropout_rate"));
  ck.scale.log_lambda = in.f32("log_lambda");

  std::map<std::string, Matrix<float>> tensors;
  while (!in.at_end()) {
    const auto name_len = in.le<std::uint16_t>("name_length");
    std::string name = in.bytes(name_len, "name");
    const auto rows = in.le<std::uint32_t>("rows");
    const auto cols = in.le<std::uint32_t>("cols");
    const std::size_t n = static_cast<std::size_t>(rows) * cols;
    if (in.remaining() / sizeof(float) < n) throw CorruptionError(source + ": truncated tensor '" + name + "'", in.offset());
    std::vector<float> values(n);
    for (auto& v : values) v = in.f32("tensor payload");
    if (!tensors.emplace(name, Matrix<float>(rows, cols, std::move(values))).second) {
      throw FormatError(source + ": duplicate tensor '" + name + "'");
    }
  }

  ck.head.ln_text = ck.head.ln_frames = ck.head.ln_attn_out = ck.head.ln_final = LayerNormParams<float>::unit(ck.head.dim);
  std::size_t used = 0;
  ck.head.for_each_tensor([&](std::string_view name, Matrix<float>& m, bool) {
    auto it = tensors.find(std::string(name));
    if (it == tensors.end()) throw FormatError(source + ": missing tensor '" + std::string(name) + "'");
    m = std::move(it->second);
    ++used;
  });
  if (used != tensors.size()) throw FormatError(source + ": unexpected extra tensors");
  try {
    ck.head.validate();
  } catch (const ShapeError& e) {
    throw FormatError(source + ": " + e.what());
  }
  if (!std::isfinite(ck.scale.log_lambda) || ck.scale.log_lambda > std::log(ck.scale.max_lambda) + 1e-6f) {
    throw FormatError(source + ": logit scale outside (0, " + std::to_string(ck.scale.max_lambda) + "]");
  }
  return ck;
}

inline void save_checkpoint(const std::filesystem::path& path, const XPoolHead<float>& head, const LogitScale<float>& scale) {
  write_file_atomic(path, encode_checkpoint(head, scale));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw InputError("checkpoint not found: '" + path.string() + "'");
  return decode_checkpoint(read_file_bytes(path), path.string());
}

/// Use-site guard: a head only applies to embeddings of its own dimension.
template <typename T>
void require_head_dim(const XPoolHead<T>& head, std::size_t corpus_dim) {
  if (head.dim != corpus_dim) {
    throw ShapeError("checkpoint dimension D=" + std::to_string(head.dim) + " does not match corpus dimension D=" +
                     std::to_string(corpus_dim));
  }
}

}  // namespace xpool
