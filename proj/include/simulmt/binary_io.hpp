#pragma once

// Little-endian binary containers.
//
// Checkpoint ("ABSM"):
//   char[4] "ABSM" | u32 version | u64 header_len | header (UTF-8 JSON) | data
//   header = {"kind": ..., "tensors": [{"name", "shape", "offset"}], ...}
//   offset is in bytes from the start of the data section; tensors are
//   stored back to back in manifest order as little-endian float32.
//
// Attention dump ("ATTN"):
//   char[4] | u32 version | u32 pairs | per pair: u32 target_len,
//   u32 source_len, row-major float32 weights
//
// Label dump ("PLBL"):
//   char[4] | u32 version | u32 pairs | per pair: u32 target_len,
//   u32 source_len, row-major u8 labels (0/1)

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "simulmt/error.hpp"
#include "simulmt/policy_labels.hpp"
#include "simulmt/seq2seq.hpp"
#include "simulmt/tensor.hpp"

namespace simulmt {

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr std::uint32_t kDumpVersion = 1;

namespace detail {

template <typename U>
U to_little(U v) {
  if constexpr (std::endian::native == std::endian::big) {
    U out;
    auto* src = reinterpret_cast<const unsigned char*>(&v);
    auto* dst = reinterpret_cast<unsigned char*>(&out);
    for (std::size_t i = 0; i < sizeof(U); ++i) dst[i] = src[sizeof(U) - 1 - i];
    return out;
  } else {
    return v;
  }
}

class ByteWriter {
 public:
  void raw(const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    bytes_.insert(bytes_.end(), b, b + n);
  }
  template <typename U>
  void put(U v) {
    v = to_little(v);
    raw(&v, sizeof(U));
  }
  void put_f32(float f) { put(std::bit_cast<std::uint32_t>(f)); }
  const std::vector<unsigned char>& bytes() const { return bytes_; }

  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write '" + path + "'");
    out.write(reinterpret_cast<const char*>(bytes_.data()), static_cast<std::streamsize>(bytes_.size()));
    if (!out) throw DataError("write failed for '" + path + "'");
  }

 private:
  std::vector<unsigned char> bytes_;
};

class ByteReader {
 public:
  ByteReader(std::vector<unsigned char> bytes, std::string path) : bytes_(std::move(bytes)), path_(std::move(path)) {}

  static ByteReader open(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open '" + path + "'");
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return ByteReader(std::move(bytes), path);
  }

  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size() || pos_ + n < pos_)
      throw CorruptionError(path_ + ": truncated at byte " + std::to_string(pos_) + " (needed " + std::to_string(n) +
                            " more bytes, file has " + std::to_string(bytes_.size()) + ")");
  }
  template <typename U>
  U get() {
    need(sizeof(U));
    U v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(U));
    pos_ += sizeof(U);
    return to_little(v);
  }
  float get_f32() { return std::bit_cast<float>(get<std::uint32_t>()); }
  std::string get_string(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  void expect_magic(const char* magic) {
    if (bytes_.size() < 4) throw FormatError(path_ + ": file too short for magic '" + magic + "'");
    const std::string got = get_string(4);
    if (got != magic) throw FormatError(path_ + ": bad magic, expected '" + std::string(magic) + "'");
  }
  std::size_t position() const { return pos_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }
  const std::string& path() const { return path_; }

 private:
  std::vector<unsigned char> bytes_;
  std::string path_;
  std::size_t pos_ = 0;
};

}  // namespace detail

/// A named float tensor with its manifest data.
struct NamedTensor {
  std::string name;
  Tensor<float> tensor;
};

struct Container {
  nlohmann::json header;  // without the "tensors" manifest
  std::vector<NamedTensor> tensors;

  const Tensor<float>& get(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return t.tensor;
    throw CorruptionError("checkpoint has no tensor '" + name + "'");
  }
};

inline void write_container(const std::string& path, const Container& c) {
  nlohmann::json header = c.header;
  nlohmann::json manifest = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& t : c.tensors) {
    manifest.push_back({{"name", t.name}, {"shape", t.tensor.shape()}, {"offset", offset}});
    offset += t.tensor.size() * sizeof(float);
  }
  header["tensors"] = manifest;
  const std::string text = header.dump();
  detail::ByteWriter w;
  w.raw("ABSM", 4);
  w.put<std::uint32_t>(kCheckpointVersion);
  w.put<std::uint64_t>(text.size());
  w.raw(text.data(), text.size());
  for (const auto& t : c.tensors)
    for (float v : t.tensor.values()) w.put_f32(v);
  w.save(path);
}

inline Container read_container(const std::string& path) {
  auto r = detail::ByteReader::open(path);
  r.expect_magic("ABSM");
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion)
    throw FormatError(path + ": unsupported checkpoint version " + std::to_string(version) + " (expected " +
                      std::to_string(kCheckpointVersion) + ")");
  const auto header_len = r.get<std::uint64_t>();
  if (header_len > r.remaining()) throw CorruptionError(path + ": header length exceeds file size");
  Container c;
  try {
    c.header = nlohmann::json::parse(r.get_string(static_cast<std::size_t>(header_len)));
  } catch (const nlohmann::json::exception& e) {
    throw CorruptionError(path + ": unreadable header (" + e.what() + ")");
  }
  try {
    const auto manifest = c.header.at("tensors");
    std::uint64_t expected = 0;
    const std::size_t data_start = r.position();
    for (const auto& entry : manifest) {
      NamedTensor t;
      t.name = entry.at("name").get<std::string>();
      const auto shape = entry.at("shape").get<std::vector<std::size_t>>();
      const auto offset = entry.at("offset").get<std::uint64_t>();
      if (offset != expected || shape.empty() || shape.size() > 3)
        throw CorruptionError(path + ": manifest entry '" + t.name + "' is inconsistent");
      t.tensor = Tensor<float>(shape);
      if (r.position() - data_start != offset) throw CorruptionError(path + ": manifest offset mismatch");
      r.need(t.tensor.size() * sizeof(float));
      for (auto& v : t.tensor.values()) v = r.get_f32();
      expected += t.tensor.size() * sizeof(float);
      c.tensors.push_back(std::move(t));
    }
  } catch (const nlohmann::json::exception& e) {
    throw CorruptionError(path + ": malformed manifest (" + e.what() + ")");
  }
  if (r.remaining() != 0) throw CorruptionError(path + ": trailing bytes after tensor data");
  c.header.erase("tensors");
  return c;
}

// ---------------------------------------------------------------------------
// Seq2seq checkpoints

inline void save_checkpoint(const Seq2SeqModel<float>& m, const std::string& path) {
  Container c;
  const auto& cfg = m.config;
  c.header["kind"] = "seq2seq";
  c.header["config"] = {{"d_model", cfg.d_model},
                        {"n_enc_layers", cfg.n_enc_layers},
                        {"n_dec_layers", cfg.n_dec_layers},
                        {"encoder_mode", to_string(cfg.encoder_mode)},
                        {"source_vocab_size", cfg.source_vocab_size},
                        {"target_vocab_size", cfg.target_vocab_size},
                        {"max_len", cfg.max_len}};
  c.header["source_vocab"] = m.source_vocab.tokens();
  c.header["target_vocab"] = m.target_vocab.tokens();
  m.params.visit([&](const std::string& name, const Tensor<float>& t) { c.tensors.push_back({name, t}); });
  write_container(path, c);
}

inline Seq2SeqModel<float> load_checkpoint(const std::string& path) {
  const Container c = read_container(path);
  Seq2SeqModel<float> m;
  try {
    if (c.header.at("kind") != "seq2seq")
      throw FormatError(path + ": checkpoint kind is '" + c.header.at("kind").get<std::string>() +
                        "', expected 'seq2seq'");
    const auto& j = c.header.at("config");
    m.config.d_model = j.at("d_model").get<std::size_t>();
    m.config.n_enc_layers = j.at("n_enc_layers").get<std::size_t>();
    m.config.n_dec_layers = j.at("n_dec_layers").get<std::size_t>();
    m.config.encoder_mode = parse_encoder_mode(j.at("encoder_mode").get<std::string>());
    m.config.source_vocab_size = j.at("source_vocab_size").get<std::size_t>();
    m.config.target_vocab_size = j.at("target_vocab_size").get<std::size_t>();
    m.config.max_len = j.at("max_len").get<std::size_t>();
    m.source_vocab = Vocab::from_tokens(c.header.at("source_vocab").get<std::vector<std::string>>());
    m.target_vocab = Vocab::from_tokens(c.header.at("target_vocab").get<std::vector<std::string>>());
  } catch (const nlohmann::json::exception& e) {
    throw CorruptionError(path + ": malformed model header (" + e.what() + ")");
  } catch (const ConfigError& e) {
    throw CorruptionError(path + ": " + e.what());
  }
  try {
    m.config.validate();
  } catch (const ConfigError& e) {
    throw CorruptionError(path + ": " + e.what());
  }
  if (m.source_vocab.size() != m.config.source_vocab_size || m.target_vocab.size() != m.config.target_vocab_size)
    throw CorruptionError(path + ": vocabulary size disagrees with config");
  m.params = Seq2SeqParams<float>(m.config);
  std::size_t expected = 0;
  m.params.visit([&](const std::string& name, Tensor<float>& t) {
    ++expected;
    const Tensor<float>& stored = c.get(name);
    if (stored.shape() != t.shape()) throw CorruptionError(path + ": shape mismatch for tensor '" + name + "'");
    t = stored;
  });
  if (expected != c.tensors.size()) throw CorruptionError(path + ": unexpected tensors in manifest");
  return m;
}

// ---------------------------------------------------------------------------
// Attention and label dumps

inline void write_attention_dump(const std::string& path, const std::vector<AttentionMatrix>& mats) {
  detail::ByteWriter w;
  w.raw("ATTN", 4);
  w.put<std::uint32_t>(kDumpVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(mats.size()));
  for (const auto& a : mats) {
    w.put<std::uint32_t>(static_cast<std::uint32_t>(a.target_len));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(a.source_len));
    for (float v : a.weights) w.put_f32(v);
  }
  w.save(path);
}

inline std::vector<AttentionMatrix> read_attention_dump(const std::string& path) {
  auto r = detail::ByteReader::open(path);
  r.expect_magic("ATTN");
  const auto version = r.get<std::uint32_t>();
  if (version != kDumpVersion) throw FormatError(path + ": unsupported attention dump version " + std::to_string(version));
  const auto n = r.get<std::uint32_t>();
  std::vector<AttentionMatrix> out;
  for (std::uint32_t k = 0; k < n; ++k) {
    AttentionMatrix a;
    a.target_len = r.get<std::uint32_t>();
    a.source_len = r.get<std::uint32_t>();
    r.need(a.target_len * a.source_len * sizeof(float));
    a.weights.resize(a.target_len * a.source_len);
    for (auto& v : a.weights) v = r.get_f32();
    out.push_back(std::move(a));
  }
  if (r.remaining() != 0) throw CorruptionError(path + ": trailing bytes after attention data");
  return out;
}

inline void write_label_dump(const std::string& path, const std::vector<PolicyLabelMatrix>& mats) {
  detail::ByteWriter w;
  w.raw("PLBL", 4);
  w.put<std::uint32_t>(kDumpVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(mats.size()));
  for (const auto& l : mats) {
    w.put<std::uint32_t>(static_cast<std::uint32_t>(l.target_len));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(l.source_len));
    w.raw(l.labels.data(), l.labels.size());
  }
  w.save(path);
}

/// Gamma is not part of the label format; it is restored as `gamma`.
inline std::vector<PolicyLabelMatrix> read_label_dump(const std::string& path, float gamma = 0.0f) {
  auto r = detail::ByteReader::open(path);
  r.expect_magic("PLBL");
  const auto version = r.get<std::uint32_t>();
  if (version != kDumpVersion) throw FormatError(path + ": unsupported label dump version " + std::to_string(version));
  const auto n = r.get<std::uint32_t>();
  std::vector<PolicyLabelMatrix> out;
  for (std::uint32_t k = 0; k < n; ++k) {
    PolicyLabelMatrix l;
    l.gamma = gamma;
    l.target_len = r.get<std::uint32_t>();
    l.source_len = r.get<std::uint32_t>();
    l.labels.resize(l.target_len * l.source_len);
    for (auto& v : l.labels) {
      v = r.get<std::uint8_t>();
      if (v > 1) throw CorruptionError(path + ": label byte outside {0,1} in pair " + std::to_string(k));
    }
    out.push_back(std::move(l));
  }
  if (r.remaining() != 0) throw CorruptionError(path + ": trailing bytes after label data");
  return out;
}

}  // namespace simulmt
