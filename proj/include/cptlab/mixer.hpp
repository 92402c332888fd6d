// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "cptlab/model.hpp"

namespace cptlab {

/// Tokens per language tag.
using Allocation = std::map<std::string, std::int64_t>;

struct MixSpec {
  std::int64_t total_tokens = 0;
  std::map<std::string, double> ratios;

  /// Throws ConfigError unless total_tokens > 0 and every weight is positive
  /// and finite.
  void validate() const;
  bool operator==(const MixSpec&) const = default;
};

/// round(total * w_i / sum(w)) with largest-remainder correction, so the
/// allocations sum to total_tokens exactly. Equal remainders go to the
/// lexicographically smaller tag first.
Allocation plan_mix(const MixSpec& spec);

/// A contiguous slice [start_fraction, end_fraction) of the training budget
/// with fixed mixing weights.
struct Phase {
  double start_fraction = 0.0;
  double end_fraction = 1.0;
  std::map<std::string, double> ratios;
};

struct PhasePlan {
  double start_fraction = 0.0;
  double end_fraction = 1.0;
  std::int64_t budget = 0;
  Allocation allocation;
};

struct MixPlan {
  std::vector<PhasePlan> phases;

  std::int64_t total() const;
  /// Per-language sums over all phases.
  Allocation language_totals() const;
};

/// Token offset of a phase boundary: ceil(fraction * units) * granularity,
/// capped at total, with units = ceil(total / granularity). Products within
/// 1e-9 relative of an integer snap to it so that 0.9 * 164e9 is exact.
std::int64_t phase_boundary(double fraction, std::int64_t total_tokens, std::int64_t granularity);

/// Splits `total_tokens` over phases that must tile [0, 1] (CurriculumError
/// otherwise), then each phase budget over its ratios with `plan_mix`. With
/// granularity set to the batch size, every phase starts on a batch boundary.
MixPlan build_curriculum(const std::vector<Phase>& phases, std::int64_t total_tokens,
                         std::int64_t granularity = 1);

/// Two-phase curriculum over declared corpus sizes. The first
/// `late_start` of the budget holds every language except `late_language`,
/// weighted by corpus size; the rest holds all of `late_language` plus
/// whatever remains of the others. Per-language totals equal the declared
/// sizes exactly.
MixPlan staged_curriculum(const Allocation& corpus_sizes, const std::string& late_language,
                          double late_start = 0.9, std::int64_t granularity = 1);

struct RepetitionPlan {
  std::int64_t passes = 0;
  std::int64_t remainder = 0;
};

/// target = passes * count + remainder, 0 <= remainder < count.
RepetitionPlan upsample(std::int64_t corpus_tokens, std::int64_t target_tokens);

/// Per-language token quotas for successive batches of one phase. Every
/// prefix of batches stays within one token of the exact proportional share,
/// and the quotas of a whole phase sum to its allocation.
class QuotaCursor {
 public:
  explicit QuotaCursor(const PhasePlan& phase);
  bool done() const { return consumed_ == budget_; }
  /// Quotas for the next batch of up to `batch_tokens` tokens.
  Allocation next(std::int64_t batch_tokens);

 private:
  Allocation allocation_;
  Allocation assigned_;
  std::int64_t budget_ = 0;
  std::int64_t consumed_ = 0;
};

struct Sequence {
  std::string language;
  std::vector<TokenId> tokens;
};

struct Batch {
  std::uint64_t index = 0;
  std::size_t phase = 0;
  std::vector<Sequence> sequences;
  Allocation composition;

  std::int64_t token_count() const;
};

class BatchSource {
 public:
  virtual ~BatchSource() = default;
  virtual std::optional<Batch> next() = 0;
};

/// Tokenized documents of one language.
struct Shard {
  std::string language;
  std::vector<std::vector<TokenId>> documents;
  /// Allows repeating the corpus when the plan needs more tokens than it has.
  bool upsample = false;

  std::int64_t token_count() const;
};

struct StreamOptions {
  std::int64_t batch_tokens = 256;
  std::size_t sequence_length = 33;
  std::uint64_t seed = 0;
  /// Truncation and upsampling remainders use a seeded document shuffle;
  /// when false they take documents in file order.
  bool shuffle_documents = true;
};

/// Deterministic producer of mixed batches following a MixPlan.
///
/// Each language is read as one token stream: the seeded-shuffled document
/// prefix when the corpus is larger than the plan needs, otherwise full
/// passes in file order followed by a seeded-shuffled remainder (upsampling
/// shards only; other shards raise DataError naming the language). A batch's
/// per-language quota is cut into sequences of at most `sequence_length`
/// tokens, languages in tag order.
class BatchStream : public BatchSource {
 public:
  BatchStream(MixPlan plan, const std::vector<Shard>& shards, StreamOptions options);

  std::optional<Batch> next() override;
  std::uint64_t total_steps() const { return total_steps_; }
  const MixPlan& plan() const { return plan_; }

 private:
  class Feed {
   public:
    Feed(const Shard& shard, std::int64_t needed, std::uint64_t seed, bool shuffle);
    std::vector<TokenId> take(std::int64_t n);

   private:
    std::shared_ptr<const std::vector<std::vector<TokenId>>> docs_;
    std::vector<std::size_t> order_;
    std::size_t doc_ = 0;
    std::size_t offset_ = 0;
    std::string language_;
  };

  MixPlan plan_;
  StreamOptions options_;
  std::map<std::string, Feed> feeds_;
  std::size_t phase_ = 0;
  std::optional<QuotaCursor> cursor_;
  std::uint64_t index_ = 0;
  std::uint64_t total_steps_ = 0;
};

/// Index of the first batch containing a token of `language`, computed from
/// quotas alone; nullopt when the plan never schedules it.
std::optional<std::uint64_t> first_batch_with(const MixPlan& plan, const std::string& language,
                                              std::int64_t batch_tokens);

/// Shard manifest ("cptlab-manifest v1"): one tab-separated record per shard
/// with path, language tag, token count and content hash.
struct ShardRecord {
  std::filesystem::path path;
  std::string language;
  std::int64_t token_count = 0;
  std::string content_hash;
};
std::string serialize_manifest(const std::vector<ShardRecord>& records);
std::vector<ShardRecord> parse_manifest(std::string_view text);

/// Plan file ("cptlab-plan v1"): one tab-separated row per phase and
/// language, "phase start end language tokens".
std::string serialize_plan(const MixPlan& plan);
MixPlan parse_plan(std::string_view text);

}  // namespace cptlab
