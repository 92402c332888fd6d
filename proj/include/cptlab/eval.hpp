// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cptlab/mixer.hpp"
#include "cptlab/model.hpp"
#include "cptlab/trainer.hpp"

namespace cptlab {

/// Teacher-forced mean next-token NLL over a token stream. The stream is cut
/// into windows of context_length + 1 tokens that overlap by one, so every
/// token after the first is predicted exactly once. DataError below two
/// tokens.
double mean_nll(const ParameterSet& params, const ModelSpec& spec, std::span<const TokenId> tokens);

/// exp(mean_nll).
double perplexity(const ParameterSet& params, const ModelSpec& spec, std::span<const TokenId> tokens);

struct ChoiceItem {
  std::string prompt;
  std::vector<std::string> choices;
  std::size_t gold = 0;
  std::string language;
};

/// Mean per-token log-likelihood of `continuation` after `prompt`. When the
/// pair exceeds the context, the oldest prompt tokens are dropped.
double continuation_score(const ParameterSet& params, const ModelSpec& spec,
                          std::span<const TokenId> prompt, std::span<const TokenId> continuation);

/// Index of the largest score; the lowest index wins ties.
std::size_t pick_choice(std::span<const double> scores);

std::size_t predict_choice(const ParameterSet& params, const ModelSpec& spec, const Vocabulary& vocab,
                           const ChoiceItem& item);

/// Fraction of items whose predicted choice is gold. DataError for items
/// with fewer than two choices, an out-of-range gold index or no items.
double choice_accuracy(const ParameterSet& params, const ModelSpec& spec, const Vocabulary& vocab,
                       const std::vector<ChoiceItem>& items);

/// Line-delimited JSON records with prompt, choices, gold, language.
std::vector<ChoiceItem> read_choice_items(const std::filesystem::path& path);

struct LanguageResult {
  double perplexity = 0.0;
  std::optional<double> accuracy;
  std::size_t item_count = 0;
  std::string corpus_hash;

  bool operator==(const LanguageResult&) const = default;
};

struct EvalReport {
  std::string checkpoint_id;
  std::map<std::string, LanguageResult> languages;

  bool operator==(const EvalReport&) const = default;
};

struct EvalSet {
  std::vector<TokenId> tokens;
  std::vector<ChoiceItem> items;
};

EvalReport evaluate(const ParameterSet& params, const ModelSpec& spec, const Vocabulary& vocab,
                    const std::map<std::string, EvalSet>& sets, std::string checkpoint_id);

/// Aligned plain-text table, one row per language.
std::string format_report(const EvalReport& report);
/// Tab-separated: label language perplexity accuracy items corpus_hash.
std::string report_table(const std::vector<std::pair<std::string, EvalReport>>& reports);

/// One arm of a language-ratio experiment.
struct RatioArm {
  std::string name;
  ModelSpec spec;
  std::uint64_t seed = 0;
  MixSpec mix;
  ScheduleSpec schedule;
  AdamConfig adam;
  StreamOptions stream;
};

struct RatioResult {
  EvalReport a;
  EvalReport b;
  RunMetrics metrics_a;
  RunMetrics metrics_b;
};

/// Trains both arms from the same initialization and evaluates them on the
/// shared sets. ConfigError when the arms differ in anything but mix ratios.
RatioResult ratio_experiment(const RatioArm& a, const RatioArm& b, const std::vector<Shard>& shards,
                             const Vocabulary& vocab, const std::map<std::string, EvalSet>& sets);

/// Side-by-side text table of two reports.
std::string format_comparison(const std::string& label_a, const EvalReport& a,
                              const std::string& label_b, const EvalReport& b);

}  // namespace cptlab
