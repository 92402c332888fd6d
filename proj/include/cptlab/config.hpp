// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "cptlab/langid.hpp"
#include "cptlab/mixer.hpp"
#include "cptlab/model.hpp"
#include "cptlab/optimizer.hpp"
#include "cptlab/schedule.hpp"

namespace cptlab {

inline constexpr int kConfigVersion = 1;

/// Model shape; the vocabulary size defaults to that of the configured
/// tokenizer.
struct ModelConfig {
  std::size_t n_layers = 2;
  std::size_t d_model = 32;
  std::size_t n_heads = 2;
  std::size_t d_ff = 64;
  std::size_t context_length = 64;
  double rope_base = 10000.0;
  std::optional<std::size_t> vocab_size;

  /// ConfigError when an explicit vocab_size disagrees with the tokenizer.
  ModelSpec resolve(std::size_t tokenizer_vocab) const;
};

struct TokenizerConfig {
  std::optional<std::filesystem::path> vocab;
  std::optional<std::filesystem::path> base;
  std::vector<std::filesystem::path> train_corpora;
  long long merges = 0;
  std::vector<std::filesystem::path> extend_corpora;
  double extension_fraction = 0.1;
  std::size_t reserved_tokens = 256;
  std::map<std::string, std::filesystem::path> fertility_corpora;
};

struct LangidConfig {
  std::optional<std::filesystem::path> training;
  std::optional<std::filesystem::path> profiles;
  std::optional<std::filesystem::path> input;
  NgramRange range;
  std::string target;
  double margin = 0.0;
};

/// Either explicit phases or the staged form (all languages but one until
/// `late_start`, then everything that remains).
struct CurriculumConfig {
  std::int64_t total_tokens = 0;
  std::int64_t granularity = 1;
  std::vector<Phase> phases;
  std::optional<std::string> late_language;
  double late_start = 0.9;
  /// Corpus sizes for the staged form; counted from the shards when empty.
  Allocation sizes;
};

struct ShardSource {
  std::string language;
  std::filesystem::path path;
  bool upsample = false;
};

struct DataConfig {
  std::vector<ShardSource> shards;
  std::int64_t batch_tokens = 256;
  std::size_t sequence_length = 65;
  bool shuffle_documents = true;
};

struct ExpansionConfig {
  std::optional<std::filesystem::path> checkpoint;
  std::size_t new_blocks = 0;
  std::optional<std::vector<std::size_t>> placement;
  bool freeze = true;
  bool extend_embeddings = false;
};

struct TrainingConfig {
  std::optional<std::filesystem::path> init;
  std::uint64_t checkpoint_every = 0;
  bool phase_checkpoints = true;
  std::optional<std::uint64_t> max_steps;
};

struct SftSection {
  std::optional<std::filesystem::path> init;
  std::optional<std::filesystem::path> pairs;
  std::optional<std::filesystem::path> validation;
  std::size_t epochs = 3;
  std::size_t pairs_per_step = 4;
};

struct EvalSection {
  std::vector<std::filesystem::path> checkpoints;
  std::map<std::string, std::filesystem::path> corpora;
  std::optional<std::filesystem::path> items;
};

struct RatioArmConfig {
  std::string name;
  std::map<std::string, double> ratios;
};

struct RatioSection {
  std::int64_t total_tokens = 0;
  std::vector<RatioArmConfig> arms;
};

/// One experiment. Paths are absolute after parsing (relative ones resolve
/// against the config file's directory).
struct ExperimentConfig {
  int version = kConfigVersion;
  std::uint64_t seed = 0;
  std::optional<std::filesystem::path> output_dir;
  ModelConfig model;
  ScheduleSpec schedule;
  AdamConfig optimizer;
  TokenizerConfig tokenizer;
  LangidConfig langid;
  std::optional<MixSpec> mix;
  std::optional<CurriculumConfig> curriculum;
  DataConfig data;
  ExpansionConfig expansion;
  TrainingConfig training;
  SftSection sft;
  EvalSection eval;
  RatioSection ratio;
};

/// Strict JSON reader: unknown keys, wrong types, a missing seed (unless
/// `seed_override` is set) or a version other than 1 raise ConfigError.
ExperimentConfig parse_config(std::string_view text, const std::filesystem::path& base_dir,
                              std::optional<std::uint64_t> seed_override = std::nullopt);
ExperimentConfig load_config(const std::filesystem::path& path,
                             std::optional<std::uint64_t> seed_override = std::nullopt);

/// Canonical JSON with every field written out; parsing it yields the same
/// config.
std::string serialize_config(const ExperimentConfig& config);
/// fnv-1a of the canonical form without output_dir, 16 hex digits.
std::string config_hash(const ExperimentConfig& config);

/// ConfigError naming `what` unless `path` is set and names an existing file.
const std::filesystem::path& require_file(const std::optional<std::filesystem::path>& path,
                                          std::string_view what);
void require_files(const std::vector<std::filesystem::path>& paths, std::string_view what);

}  // namespace cptlab
