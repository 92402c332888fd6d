// SPDX-License-Identifier: Apache-2.0
#include "cptlab/model.hpp"

#include <fmt/format.h>

#include <charconv>

#include "cptlab/error.hpp"

namespace cptlab {

void ModelSpec::validate() const {
  if (n_layers == 0 || d_model == 0 || n_heads == 0 || d_ff == 0 || context_length == 0) {
    throw ConfigError("model spec: every dimension must be positive");
  }
  if (d_model % n_heads != 0) {
    throw ConfigError(fmt::format("model spec: d_model {} is not divisible by n_heads {}", d_model,
                                  n_heads));
  }
  if (head_dim() % 2 != 0) {
    throw ConfigError(fmt::format("model spec: head size {} must be even for rotary positions",
                                  head_dim()));
  }
  if (vocab_size < 256) {
    throw ConfigError(fmt::format("model spec: vocab_size {} below the byte-level floor of 256",
                                  vocab_size));
  }
  if (!(rope_base > 0.0)) throw ConfigError("model spec: rope_base must be positive");
}

std::uint64_t block_parameter_count(const ModelSpec& s) {
  const std::uint64_t d = s.d_model, ff = s.d_ff;
  return 4 * d * d + 3 * d * ff + 2 * d;
}

std::uint64_t parameter_count(const ModelSpec& s) {
  return s.n_layers * block_parameter_count(s) + 2ULL * s.vocab_size * s.d_model + s.d_model;
}

namespace param_path {

std::string layer(std::size_t index, std::string_view sublayer) {
  return fmt::format("layers.{}.{}", index, sublayer);
}

long layer_index(std::string_view path) {
  constexpr std::string_view prefix = "layers.";
  if (path.substr(0, prefix.size()) != prefix) return -1;
  path.remove_prefix(prefix.size());
  long index = -1;
  auto [ptr, ec] = std::from_chars(path.data(), path.data() + path.size(), index);
  if (ec != std::errc() || ptr == path.data() + path.size() || *ptr != '.') return -1;
  return index;
}

}  // namespace param_path

const Tensor& ParameterSet::at(std::string_view path) const {
  auto it = tensors.find(std::string(path));
  if (it == tensors.end()) throw IndexError(fmt::format("no parameter named '{}'", path));
  return it->second;
}

Tensor& ParameterSet::at(std::string_view path) {
  return const_cast<Tensor&>(static_cast<const ParameterSet&>(*this).at(path));
}

std::size_t ParameterSet::frozen_row_count(const std::string& path) const {
  if (frozen.contains(path)) return at(path).rows();
  auto it = frozen_rows.find(path);
  return it == frozen_rows.end() ? 0 : it->second;
}

bool ParameterSet::fully_frozen(const std::string& path) const {
  return frozen_row_count(path) == at(path).rows();
}

std::uint64_t ParameterSet::total_count() const {
  std::uint64_t n = 0;
  for (const auto& [_, t] : tensors) n += t.size();
  return n;
}

std::uint64_t ParameterSet::trainable_count() const {
  std::uint64_t n = 0;
  for (const auto& [path, t] : tensors) n += (t.rows() - frozen_row_count(path)) * t.row_width();
  return n;
}

void ParameterSet::validate(const ModelSpec& spec) const {
  spec.validate();
  auto expect = [&](const std::string& path, const Shape& shape) {
    auto it = tensors.find(path);
    if (it == tensors.end()) throw PlanError(fmt::format("parameter '{}' is missing", path));
    if (it->second.shape != shape) {
      throw DimensionError(fmt::format("parameter '{}' has shape {}, expected {}", path,
                                       shape_string(it->second.shape), shape_string(shape)));
    }
  };
  const auto d = spec.d_model, ff = spec.d_ff;
  expect(std::string(param_path::embedding), {spec.vocab_size, d});
  expect(std::string(param_path::output), {spec.vocab_size, d});
  expect(std::string(param_path::final_norm), {d});
  for (std::size_t l = 0; l < spec.n_layers; ++l) {
    for (auto name : {"wq", "wk", "wv", "wo"}) expect(param_path::layer(l, name), {d, d});
    expect(param_path::layer(l, "w_gate"), {d, ff});
    expect(param_path::layer(l, "w_up"), {d, ff});
    expect(param_path::layer(l, "w_down"), {ff, d});
    for (auto name : param_path::block_norms) expect(param_path::layer(l, name), {d});
  }
  const std::size_t expected = 3 + spec.n_layers * 9;
  if (tensors.size() != expected) {
    throw PlanError(fmt::format("parameter set holds {} tensors, spec implies {}", tensors.size(),
                                expected));
  }
  for (const auto& path : frozen) {
    if (!tensors.contains(path)) throw PlanError(fmt::format("frozen path '{}' does not exist", path));
  }
  for (const auto& [path, rows] : frozen_rows) {
    auto it = tensors.find(path);
    if (it == tensors.end()) throw PlanError(fmt::format("frozen path '{}' does not exist", path));
    if (rows > it->second.rows()) {
      throw PlanError(fmt::format("'{}' freezes {} rows of {}", path, rows, it->second.rows()));
    }
  }
}

namespace {

Tensor normal_tensor(Shape shape, Rng& rng, double stddev) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (auto& v : t.data) v = rng.normal() * stddev;
  return t;
}

constexpr double kInitStd = 0.02;

}  // namespace

ParameterSet init_parameters(const ModelSpec& spec, Rng& rng) {
  spec.validate();
  const auto d = spec.d_model, ff = spec.d_ff;
  ParameterSet p;
  p.tensors.emplace(param_path::embedding, normal_tensor({spec.vocab_size, d}, rng, kInitStd));
  for (std::size_t l = 0; l < spec.n_layers; ++l) {
    for (auto name : param_path::block_matrices) {
      Shape shape{d, d};
      if (name == "w_gate" || name == "w_up") shape = {d, ff};
      if (name == "w_down") shape = {ff, d};
      p.tensors.emplace(param_path::layer(l, name), normal_tensor(shape, rng, kInitStd));
    }
    for (auto name : param_path::block_norms)
      p.tensors.emplace(param_path::layer(l, name), Tensor::filled({d}, 1.0));
  }
  p.tensors.emplace(param_path::output, normal_tensor({spec.vocab_size, d}, rng, kInitStd));
  p.tensors.emplace(param_path::final_norm, Tensor::filled({d}, 1.0));
  return p;
}

Var BoundParameters::at(std::string_view path) const {
  auto it = vars.find(path);
  if (it == vars.end()) throw IndexError(fmt::format("no bound parameter named '{}'", path));
  return it->second;
}

BoundParameters bind_parameters(Tape& tape, const ParameterSet& params, bool track_grads) {
  BoundParameters bound;
  for (const auto& [path, tensor] : params.tensors) {
    const bool grads = track_grads && !params.fully_frozen(path);
    bound.vars.emplace(path, tape.leaf(tensor, grads));
  }
  return bound;
}

Var forward(Tape& /*tape*/, const BoundParameters& p, const ModelSpec& spec,
            std::span<const TokenId> tokens) {
  if (tokens.empty()) throw LengthError("forward: empty token sequence");
  if (tokens.size() > spec.context_length) {
    throw LengthError(fmt::format("forward: {} tokens exceed the context length {}", tokens.size(),
                                  spec.context_length));
  }
  Var x = embedding_lookup(p.at(param_path::embedding), tokens);
  for (std::size_t l = 0; l < spec.n_layers; ++l) {
    auto w = [&](std::string_view name) { return p.at(param_path::layer(l, name)); };
    Var h = rms_norm(x, w("attention_norm"));
    Var q = rotary_position_encode(matmul(h, w("wq")), spec.n_heads, spec.rope_base);
    Var k = rotary_position_encode(matmul(h, w("wk")), spec.n_heads, spec.rope_base);
    Var v = matmul(h, w("wv"));
    Var attn = attention_combine(causal_attention_scores(q, k, spec.n_heads), v, spec.n_heads);
    x = add(x, matmul(attn, w("wo")));
    Var h2 = rms_norm(x, w("ffn_norm"));
    Var gated = multiply(silu(matmul(h2, w("w_gate"))), matmul(h2, w("w_up")));
    x = add(x, matmul(gated, w("w_down")));
  }
  x = rms_norm(x, p.at(param_path::final_norm));
  return matmul(x, transpose(p.at(param_path::output)));
}

Tensor forward(const ParameterSet& params, const ModelSpec& spec, std::span<const TokenId> tokens) {
  Tape tape(false);
  auto bound = bind_parameters(tape, params, false);
  return forward(tape, bound, spec, tokens).value();
}

Var sequence_loss(Tape& tape, const BoundParameters& params, const ModelSpec& spec,
                  std::span<const TokenId> tokens, std::span<const double> target_weights) {
  if (tokens.size() < 2) throw LengthError("sequence_loss: need at least two tokens");
  Var logits = forward(tape, params, spec, tokens.first(tokens.size() - 1));
  return softmax_cross_entropy(logits, tokens.subspan(1), target_weights);
}

}  // namespace cptlab
