// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace cptlab {

struct NgramRange {
  std::size_t min_n = 1;
  std::size_t max_n = 4;
};

/// Add-one smoothed character n-gram model of one language.
///
/// N-grams are taken per whitespace-delimited word padded with one space on
/// each side, so a line's n-gram multiset is the union of its words'.
struct LangProfile {
  std::string tag;
  NgramRange range;
  /// log P(ngram | language) for every n-gram seen in training.
  std::unordered_map<std::string, double> log_prob;
  /// log P for an unseen n-gram, indexed by n - range.min_n.
  std::vector<double> unseen_log_prob;
  /// Fraction of training lines carrying this tag.
  double prior = 0.0;
  std::uint64_t sentences = 0;
};

struct LabeledLine {
  std::string text;
  std::string tag;
};

struct Classification {
  std::string predicted;
  /// log prior + summed n-gram log-likelihood, one entry per trained tag.
  std::map<std::string, double> scores;
  /// Top score minus runner-up (0 on a tie).
  double margin = 0.0;
};

/// Code-point n-grams of one line, as described on LangProfile.
std::vector<std::string> extract_ngrams(std::string_view text, NgramRange range);

/// Profiles sorted by tag. Throws DataError for fewer than two tags or an
/// n-gram range with min_n == 0 or min_n > max_n.
std::vector<LangProfile> train_classifier(const std::vector<LabeledLine>& labeled,
                                          NgramRange range = {});

/// Arg-max of the scores; ties resolve to the lexicographically smallest tag.
Classification classify(const std::vector<LangProfile>& profiles, std::string_view text);

struct FilterCounts {
  std::uint64_t lines = 0;
  std::uint64_t kept = 0;
  std::uint64_t rejected = 0;
  /// Rejected lines by predicted tag (a low-margin target line counts under
  /// the target tag).
  std::map<std::string, std::uint64_t> rejected_by_tag;
};

/// Keeps the lines predicted as `target` with margin >= `margin_threshold`,
/// writing every other line to `rejected`. Both outputs keep input order.
/// Throws IoError naming the line for unreadable input or invalid UTF-8.
FilterCounts filter_corpus(const std::vector<LangProfile>& profiles, std::istream& input,
                           std::ostream& kept, std::ostream& rejected, const std::string& target,
                           double margin_threshold);

/// Precision and recall of `target` on a labeled audit set at a margin.
struct AuditResult {
  double accuracy = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  std::uint64_t items = 0;
};
AuditResult audit(const std::vector<LangProfile>& profiles, const std::vector<LabeledLine>& labeled,
                  const std::string& target, double margin_threshold = 0.0);

/// Versioned plain-text profile file ("cptlab-langid v1").
std::string serialize_profiles(const std::vector<LangProfile>& profiles);
std::vector<LangProfile> parse_profiles(std::string_view text);
void save_profiles(const std::vector<LangProfile>& profiles, const std::filesystem::path& path);
std::vector<LangProfile> load_profiles(const std::filesystem::path& path);

/// Tab-separated "<tag>\t<text>" lines.
std::vector<LabeledLine> read_labeled(const std::filesystem::path& path);

}  // namespace cptlab
