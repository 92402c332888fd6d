// SPDX-License-Identifier: Apache-2.0
#include "cptlab/checkpoint.hpp"

#include <fmt/format.h>

#include <bit>
#include <cstring>

#include "cptlab/error.hpp"
#include "cptlab/text.hpp"

namespace cptlab {
namespace {

constexpr std::string_view kMagic = "CPTLCKPT";
constexpr std::uint32_t kVersion = 1;

class Writer {
 public:
  void raw(std::string_view bytes) { out_.append(bytes); }
  void u8(std::uint8_t v) { out_.push_back(static_cast<char>(v)); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void str(std::string_view s) {
    u64(s.size());
    raw(s);
  }
  void tensor(const Tensor& t) {
    u64(t.shape.size());
    for (auto d : t.shape) u64(d);
    for (double v : t.data) f64(v);
  }
  std::string& bytes() { return out_; }

 private:
  std::string out_;
};

class Reader {
 public:
  explicit Reader(std::string_view in) : in_(in) {}

  std::string_view raw(std::size_t n) {
    if (n > in_.size() - pos_) throw FormatError("checkpoint is truncated");
    auto s = in_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::uint8_t u8() { return static_cast<std::uint8_t>(raw(1)[0]); }
  std::uint32_t u32() {
    auto b = raw(4);
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i) v = (v << 8) | static_cast<unsigned char>(b[i]);
    return v;
  }
  std::uint64_t u64() {
    auto b = raw(8);
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | static_cast<unsigned char>(b[i]);
    return v;
  }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string str() { return std::string(raw(checked_count(u64(), 1))); }
  Tensor tensor() {
    const auto rank = checked_count(u64(), 8);
    Shape shape(rank);
    for (auto& d : shape) d = u64();
    const auto n = checked_count(shape_size(shape), 8);
    std::vector<double> data(n);
    for (auto& v : data) v = f64();
    return Tensor(std::move(shape), std::move(data));
  }
  /// Guards length fields against values the remaining bytes cannot hold.
  std::uint64_t checked_count(std::uint64_t n, std::size_t min_bytes_each) {
    if (n > (in_.size() - pos_) / min_bytes_each) throw FormatError("checkpoint length field is corrupt");
    return n;
  }
  std::size_t position() const { return pos_; }
  bool done() const { return pos_ == in_.size(); }

 private:
  std::string_view in_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string serialize_checkpoint(const Checkpoint& c) {
  Writer w;
  w.raw(kMagic);
  w.u32(kVersion);
  const auto& s = c.spec;
  for (auto v : {s.n_layers, s.d_model, s.n_heads, s.d_ff, s.vocab_size, s.context_length}) w.u64(v);
  w.f64(s.rope_base);
  w.str(c.tokenizer_fingerprint);
  w.u64(c.step);
  w.u64(c.batches_consumed);
  w.u64(c.params.frozen.size());
  for (const auto& p : c.params.frozen) w.str(p);
  w.u64(c.params.frozen_rows.size());
  for (const auto& [p, rows] : c.params.frozen_rows) {
    w.str(p);
    w.u64(rows);
  }
  w.u64(c.params.tensors.size());
  for (const auto& [path, t] : c.params.tensors) {
    w.str(path);
    w.tensor(t);
  }
  w.u8(c.optimizer ? 1 : 0);
  if (c.optimizer) {
    const auto& o = *c.optimizer;
    w.f64(o.config.beta1);
    w.f64(o.config.beta2);
    w.f64(o.config.eps);
    w.f64(o.config.weight_decay);
    w.f64(o.config.clip_norm);
    w.u64(o.step);
    w.u64(o.first_moment.size());
    for (const auto& [path, m] : o.first_moment) {
      w.str(path);
      w.tensor(m);
      w.tensor(o.second_moment.at(path));
    }
  }
  const auto checksum = fnv1a64(w.bytes());
  w.u64(checksum);
  return std::move(w.bytes());
}

Checkpoint deserialize_checkpoint(std::string_view bytes) {
  if (bytes.size() < kMagic.size() + 12) throw FormatError("checkpoint is truncated");
  const auto body = bytes.substr(0, bytes.size() - 8);
  Reader tail(bytes.substr(bytes.size() - 8));
  if (tail.u64() != fnv1a64(body)) throw FormatError("checkpoint checksum mismatch");

  Reader r(body);
  if (r.raw(kMagic.size()) != kMagic) throw FormatError("not a checkpoint file");
  if (const auto v = r.u32(); v != kVersion) {
    throw FormatError(fmt::format("unsupported checkpoint version {}", v));
  }
  Checkpoint c;
  auto& s = c.spec;
  s.n_layers = r.u64();
  s.d_model = r.u64();
  s.n_heads = r.u64();
  s.d_ff = r.u64();
  s.vocab_size = r.u64();
  s.context_length = r.u64();
  s.rope_base = r.f64();
  c.tokenizer_fingerprint = r.str();
  c.step = r.u64();
  c.batches_consumed = r.u64();
  for (auto n = r.checked_count(r.u64(), 8); n > 0; --n) c.params.frozen.insert(r.str());
  for (auto n = r.checked_count(r.u64(), 16); n > 0; --n) {
    auto path = r.str();
    c.params.frozen_rows[path] = r.u64();
  }
  for (auto n = r.checked_count(r.u64(), 16); n > 0; --n) {
    auto path = r.str();
    c.params.tensors.emplace(std::move(path), r.tensor());
  }
  if (r.u8() != 0) {
    OptimizerState o;
    o.config.beta1 = r.f64();
    o.config.beta2 = r.f64();
    o.config.eps = r.f64();
    o.config.weight_decay = r.f64();
    o.config.clip_norm = r.f64();
    o.step = r.u64();
    for (auto n = r.checked_count(r.u64(), 24); n > 0; --n) {
      auto path = r.str();
      o.first_moment.emplace(path, r.tensor());
      o.second_moment.emplace(path, r.tensor());
    }
    c.optimizer = std::move(o);
  }
  if (!r.done()) throw FormatError("trailing bytes after checkpoint body");
  c.params.validate(c.spec);
  return c;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  write_file_atomic(path, serialize_checkpoint(ckpt));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return deserialize_checkpoint(read_file(path));
}

}  // namespace cptlab
