// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cptlab/autograd.hpp"
#include "cptlab/rng.hpp"
#include "cptlab/tensor.hpp"

namespace cptlab {

using TokenId = std::uint32_t;

/// Architecture of a pre-norm decoder-only transformer with rotary positions
/// and a gated SiLU feed-forward, plain multi-head attention, untied
/// embedding and output tables.
struct ModelSpec {
  std::size_t n_layers = 2;
  std::size_t d_model = 32;
  std::size_t n_heads = 2;
  std::size_t d_ff = 64;
  std::size_t vocab_size = 256;
  std::size_t context_length = 64;
  double rope_base = 10000.0;

  /// Throws ConfigError on any violated invariant.
  void validate() const;
  std::size_t head_dim() const { return d_model / n_heads; }

  bool operator==(const ModelSpec&) const = default;
};

/// Parameters per block: four attention projections, three FFN matrices and
/// two norm gains.
std::uint64_t block_parameter_count(const ModelSpec& spec);
/// Total count from the formula alone; nothing is allocated.
std::uint64_t parameter_count(const ModelSpec& spec);

namespace param_path {

inline constexpr std::string_view embedding = "tok_embeddings";
inline constexpr std::string_view output = "output";
inline constexpr std::string_view final_norm = "norm";

/// Sublayers of one block in initialization order.
inline constexpr std::string_view block_matrices[] = {"wq", "wk", "wv", "wo",
                                                      "w_gate", "w_up", "w_down"};
inline constexpr std::string_view block_norms[] = {"attention_norm", "ffn_norm"};

std::string layer(std::size_t index, std::string_view sublayer);
/// Layer index of a "layers.<i>.<name>" path, or -1 for non-block paths.
long layer_index(std::string_view path);

}  // namespace param_path

/// Named parameter tensors plus the freeze mask.
///
/// `frozen` lists whole tensors excluded from updates. `frozen_rows` freezes
/// only the leading rows of a table (used for token tables whose newest rows
/// keep training).
struct ParameterSet {
  std::map<std::string, Tensor> tensors;
  std::set<std::string> frozen;
  std::map<std::string, std::size_t> frozen_rows;

  const Tensor& at(std::string_view path) const;
  Tensor& at(std::string_view path);

  /// Number of leading rows that must not change (all rows when fully frozen).
  std::size_t frozen_row_count(const std::string& path) const;
  bool fully_frozen(const std::string& path) const;
  std::uint64_t total_count() const;
  std::uint64_t trainable_count() const;

  /// Checks the structure against `spec` and the freeze mask against the map.
  void validate(const ModelSpec& spec) const;
};

/// Scaled-normal (std 0.02) matrices and unit norm gains; nothing frozen.
ParameterSet init_parameters(const ModelSpec& spec, Rng& rng);

/// Parameters copied onto a tape as leaves.
struct BoundParameters {
  std::map<std::string, Var, std::less<>> vars;
  Var at(std::string_view path) const;
};

/// Leaves track gradients when `track_grads` is set and the tensor is not
/// fully frozen.
BoundParameters bind_parameters(Tape& tape, const ParameterSet& params, bool track_grads);

/// Logits [len x vocab_size] recorded on `tape`. Throws LengthError for input
/// longer than the context and IndexError for ids outside the vocabulary.
Var forward(Tape& tape, const BoundParameters& params, const ModelSpec& spec,
            std::span<const TokenId> tokens);

/// Inference-only forward pass.
Tensor forward(const ParameterSet& params, const ModelSpec& spec, std::span<const TokenId> tokens);

/// Mean next-token loss of one sequence (inputs tokens[0..n-1), targets
/// tokens[1..n)), optionally weighted per target position.
Var sequence_loss(Tape& tape, const BoundParameters& params, const ModelSpec& spec,
                  std::span<const TokenId> tokens, std::span<const double> target_weights = {});

}  // namespace cptlab
