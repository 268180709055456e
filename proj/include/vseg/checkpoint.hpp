#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>

#include "json.hpp"

#include "vseg/error.hpp"
#include "vseg/network.hpp"
#include "vseg/pgm.hpp"

namespace vseg {

inline constexpr std::uint16_t kCheckpointVersion = 1;

struct CheckpointMeta {
  std::string method = "supervised";
  std::string role = "model";  // model, teacher or student
  std::uint64_t iteration = 0;
  double ema_alpha = 0.99;
  ModelConfig model;
};

inline nlohmann::json to_json(const ModelConfig& c) {
  return {{"input_size", c.input_size},   {"input_channels", c.input_channels},
          {"output_channels", c.output_channels}, {"base_width", c.base_width},
          {"cardinality", c.cardinality}, {"blocks_per_stage", c.blocks_per_stage},
          {"batchnorm", c.batchnorm}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.input_size = j.value("input_size", c.input_size);
  c.input_channels = j.value("input_channels", c.input_channels);
  c.output_channels = j.value("output_channels", c.output_channels);
  c.base_width = j.value("base_width", c.base_width);
  c.cardinality = j.value("cardinality", c.cardinality);
  c.blocks_per_stage = j.value("blocks_per_stage", c.blocks_per_stage);
  c.batchnorm = j.value("batchnorm", c.batchnorm);
  return c;
}

namespace detail {

class ByteWriter {
 public:
  template <typename U>
  void put(U v) {
    std::uint64_t bits = 0;
    if constexpr (std::is_same_v<U, float>)
      bits = std::bit_cast<std::uint32_t>(v);
    else
      bits = static_cast<std::uint64_t>(v);
    for (std::size_t i = 0; i < sizeof(U); ++i) out_.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
  }
  void bytes(const std::string& s) { out_ += s; }
  std::string& str() { return out_; }

 private:
  std::string out_;
};

class ByteReader {
 public:
  ByteReader(const std::string& s, std::string name) : s_(s), name_(std::move(name)) {}

  template <typename U>
  U get() {
    need(sizeof(U));
    std::uint64_t bits = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i)
      bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(s_[pos_ + i])) << (8 * i);
    pos_ += sizeof(U);
    if constexpr (std::is_same_v<U, float>)
      return std::bit_cast<float>(static_cast<std::uint32_t>(bits));
    else
      return static_cast<U>(bits);
  }
  std::string bytes(std::size_t n) {
    need(n);
    std::string r = s_.substr(pos_, n);
    pos_ += n;
    return r;
  }
  bool done() const { return pos_ == s_.size(); }

 private:
  void need(std::size_t n) const {
    if (s_.size() - pos_ < n) throw FormatError(name_ + ": truncated checkpoint");
  }
  const std::string& s_;
  std::string name_;
  std::size_t pos_ = 0;
};

}  // namespace detail

/// Layout (little-endian): "VSEG", u16 version, u64 config digest, u32 metadata
/// length + JSON metadata, u32 record count, then per record u16 name length,
/// name, u8 rank, u32 dims[rank], u64 value count, float32 values.
inline std::string encode_checkpoint(const SegModel<float>& model, CheckpointMeta meta) {
  meta.model = model.config();
  detail::ByteWriter w;
  w.bytes("VSEG");
  w.put<std::uint16_t>(kCheckpointVersion);
  w.put<std::uint64_t>(model.config().digest());
  const nlohmann::json j = {{"method", meta.method},
                            {"role", meta.role},
                            {"iteration", meta.iteration},
                            {"ema_alpha", meta.ema_alpha},
                            {"model", to_json(meta.model)}};
  const std::string js = j.dump();
  w.put<std::uint32_t>(static_cast<std::uint32_t>(js.size()));
  w.bytes(js);
  const auto& params = model.params();
  w.put<std::uint32_t>(static_cast<std::uint32_t>(params.size()));
  for (const auto& p : params) {
    w.put<std::uint16_t>(static_cast<std::uint16_t>(p.name.size()));
    w.bytes(p.name);
    w.put<std::uint8_t>(static_cast<std::uint8_t>(p.value.rank()));
    for (std::size_t d : p.value.shape()) w.put<std::uint32_t>(static_cast<std::uint32_t>(d));
    w.put<std::uint64_t>(p.value.size());
    for (float v : p.value.values()) w.put<float>(v);
  }
  return std::move(w.str());
}

inline void save_checkpoint(const fs::path& path, const SegModel<float>& model, const CheckpointMeta& meta = {}) {
  write_file_atomic(path, encode_checkpoint(model, meta));
}

struct LoadedCheckpoint {
  CheckpointMeta meta;
  SegModel<float> model;
};

inline LoadedCheckpoint decode_checkpoint(const std::string& bytes, const std::string& name = "checkpoint") {
  detail::ByteReader r(bytes, name);
  if (r.bytes(4) != "VSEG") throw FormatError(name + ": bad magic");
  const auto version = r.get<std::uint16_t>();
  if (version != kCheckpointVersion)
    throw VersionError(name + ": unsupported checkpoint version " + std::to_string(version));
  const auto digest = r.get<std::uint64_t>();
  const auto meta_len = r.get<std::uint32_t>();
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(r.bytes(meta_len));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(name + ": metadata is not valid JSON: " + e.what());
  }
  CheckpointMeta meta;
  meta.method = j.value("method", meta.method);
  meta.role = j.value("role", meta.role);
  meta.iteration = j.value("iteration", meta.iteration);
  meta.ema_alpha = j.value("ema_alpha", meta.ema_alpha);
  meta.model = model_config_from_json(j.value("model", nlohmann::json::object()));
  if (meta.model.digest() != digest) throw DigestError(name + ": model config digest mismatch");
  SegModel<float> model(meta.model, 0);
  auto& params = model.params();
  const auto count = r.get<std::uint32_t>();
  if (count != params.size())
    throw FormatError(name + ": expected " + std::to_string(params.size()) + " records, found " + std::to_string(count));
  for (std::size_t i = 0; i < count; ++i) {
    const auto len = r.get<std::uint16_t>();
    const std::string pname = r.bytes(len);
    Parameter<float>* p = params.find(pname);
    if (!p) throw FormatError(name + ": unknown parameter " + pname);
    const auto rank = r.get<std::uint8_t>();
    Shape shape;
    for (std::size_t k = 0; k < rank; ++k) shape.push_back(r.get<std::uint32_t>());
    if (shape != p->value.shape())
      throw FormatError(name + ": parameter " + pname + " has shape " + shape_string(shape) + ", expected " +
                        shape_string(p->value.shape()));
    const auto n = r.get<std::uint64_t>();
    if (n != p->value.size()) throw FormatError(name + ": value count mismatch for " + pname);
    for (std::size_t k = 0; k < n; ++k) p->value[k] = r.get<float>();
  }
  if (!r.done()) throw FormatError(name + ": trailing bytes after the last record");
  return {meta, std::move(model)};
}

inline LoadedCheckpoint load_checkpoint(const fs::path& path) {
  return decode_checkpoint(read_file(path), path.string());
}

/// Loads parameters into an existing model; its config must match the file.
inline CheckpointMeta load_into(SegModel<float>& model, const fs::path& path) {
  LoadedCheckpoint c = load_checkpoint(path);
  if (c.model.config().digest() != model.config().digest())
    throw DigestError(path.string() + ": checkpoint was written for a different model config");
  for (std::size_t i = 0; i < model.params().size(); ++i) model.params()[i].value = c.model.params()[i].value;
  return c.meta;
}

}  // namespace vseg
