// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

#include "cptlab/model.hpp"
#include "cptlab/optimizer.hpp"

namespace cptlab {

/// Everything needed to resume or evaluate a run.
///
/// On-disk layout (all integers u64 little-endian, floats IEEE-754 binary64
/// little-endian, strings as u64 length + bytes):
///
///   "CPTLCKPT" u32 version
///   header: n_layers d_model n_heads d_ff vocab_size context_length
///           rope_base tokenizer_fingerprint step batches_consumed
///           frozen paths (count, path...) frozen rows (count, (path rows)...)
///   tensors: count, then per tensor path rank dims... data...
///   optimizer: u8 present, then beta1 beta2 eps weight_decay clip_norm
///              step, moment count, per moment path m-tensor v-tensor
///   u64 FNV-1a of every preceding byte
struct Checkpoint {
  ModelSpec spec;
  std::string tokenizer_fingerprint;
  std::uint64_t step = 0;
  std::uint64_t batches_consumed = 0;
  ParameterSet params;
  std::optional<OptimizerState> optimizer;
};

std::string serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint deserialize_checkpoint(std::string_view bytes);

/// Atomic write (temporary file + rename).
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace cptlab
