// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "cptlab/checkpoint.hpp"
#include "cptlab/mixer.hpp"
#include "cptlab/optimizer.hpp"
#include "cptlab/schedule.hpp"
#include "cptlab/tokenizer.hpp"

namespace cptlab {

/// One consumed batch. A batch without any prediction target is consumed
/// without an update; its record repeats the current step and has a NaN
/// loss (null in the metrics file) and a zero rate.
struct StepRecord {
  std::uint64_t step = 0;
  double loss = 0.0;
  double learning_rate = 0.0;
  std::int64_t tokens = 0;
  double millis = 0.0;
};

/// Per-step records plus running aggregates.
class RunMetrics {
 public:
  void add(const StepRecord& record);
  const std::vector<StepRecord>& steps() const { return steps_; }
  std::int64_t total_tokens() const { return total_tokens_; }
  double total_seconds() const { return total_millis_ / 1000.0; }
  /// Zero when no time has been recorded.
  double tokens_per_second() const;

 private:
  std::vector<StepRecord> steps_;
  std::int64_t total_tokens_ = 0;
  double total_millis_ = 0.0;
};

/// One JSON object per line: step, loss, lr, tokens, millis.
std::string metrics_line(const StepRecord& record);
RunMetrics read_metrics(const std::filesystem::path& path);

struct TrainConfig {
  ScheduleSpec schedule;
  AdamConfig adam;
  /// Write a checkpoint every this many steps; 0 disables cadence saves.
  std::uint64_t checkpoint_every = 0;
  /// Also save when the stream crosses into a new curriculum phase.
  bool checkpoint_at_phase_boundary = true;
  /// Where checkpoints go; nothing is written when empty.
  std::filesystem::path checkpoint_dir;
  /// Append-only metrics file; skipped when empty.
  std::filesystem::path metrics_path;
  /// Stop after reaching this global step (used to interrupt runs).
  std::optional<std::uint64_t> stop_at_step;
};

struct SavedCheckpoint {
  std::uint64_t step = 0;
  std::string reason;
  std::filesystem::path path;
};

enum class StopReason { schedule_complete, stream_exhausted, stop_requested };

struct PretrainResult {
  Checkpoint final;
  RunMetrics metrics;
  std::vector<SavedCheckpoint> saved;
  StopReason reason = StopReason::schedule_complete;
};

/// Token-weighted mean next-token loss over the sequences of a batch.
/// Sequences shorter than two tokens contribute no targets. Returns nullopt
/// when the batch holds no targets at all.
std::optional<Var> batch_loss(Tape& tape, const BoundParameters& params, const ModelSpec& spec,
                              const Batch& batch);

/// Gradients of every parameter that is not fully frozen.
Gradients collect_gradients(const Tape& tape, const BoundParameters& bound,
                            const ParameterSet& params);

/// Runs the step loop from `start`. `stream` must be positioned at its first
/// batch: the `start.batches_consumed` batches already trained on are skipped,
/// which makes resuming a saved checkpoint against a rebuilt stream bitwise
/// equivalent to an uninterrupted run. The update taken at step s uses
/// lr_at(s + 1). Batches without targets are consumed but take no step.
/// A non-finite loss or gradient writes a diagnostic checkpoint
/// (when a directory is set) and throws TrainingError.
PretrainResult pretrain(Checkpoint start, BatchSource& stream, const TrainConfig& config);

struct InstructionPair {
  std::string instruction;
  std::optional<std::string> context;
  std::string response;
  std::string language;
};

/// Control bytes that delimit the instruction template. They map to the
/// single-byte tokens of the same value.
inline constexpr TokenId kInstructionMark = 0x01;
inline constexpr TokenId kContextMark = 0x02;
inline constexpr TokenId kResponseMark = 0x03;
inline constexpr TokenId kEndMark = 0x04;

struct FormattedExample {
  std::vector<TokenId> tokens;
  /// True exactly over the response tokens.
  std::vector<bool> loss_mask;
};

/// <01> instruction [<02> context] <03> response <04>. DataError on an empty
/// instruction or response.
FormattedExample format_instruction(const InstructionPair& pair, const Vocabulary& vocab);

/// Line-delimited JSON records with instruction, optional context, response
/// and language.
std::vector<InstructionPair> read_instruction_pairs(const std::filesystem::path& path);

/// Fraction of response positions where the argmax prediction is the target.
double response_token_accuracy(const ParameterSet& params, const ModelSpec& spec,
                               const std::vector<FormattedExample>& examples);

using Validator = std::function<double(const ParameterSet&, const ModelSpec&, std::size_t epoch)>;

struct SftConfig {
  std::size_t epochs = 3;
  std::size_t pairs_per_step = 4;
  ScheduleSpec schedule;
  AdamConfig adam;
  std::uint64_t seed = 0;
  std::filesystem::path checkpoint_dir;
};

struct EpochCheckpoint {
  std::size_t epoch = 0;  // 1-based
  Checkpoint checkpoint;
  double score = 0.0;
  std::filesystem::path path;
};

struct SftResult {
  std::vector<EpochCheckpoint> epochs;
  /// Index into `epochs` of the best score; the earliest epoch wins ties.
  std::size_t selected = 0;
  RunMetrics metrics;
};

/// Number of optimizer steps sft() takes.
std::uint64_t sft_steps(std::size_t pairs, const SftConfig& config);

/// Fine-tunes with every parameter trainable and the loss restricted to
/// response tokens. Pairs are reshuffled each epoch from the config seed.
/// ConfigError for zero epochs or a schedule shorter than sft_steps().
SftResult sft(Checkpoint start, const std::vector<FormattedExample>& examples,
              const SftConfig& config, const Validator& validate);

}  // namespace cptlab
