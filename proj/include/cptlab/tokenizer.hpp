// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "cptlab/model.hpp"

namespace cptlab {

/// Byte-level BPE state: ids 0..255 are single bytes, every later id is the
/// concatenation of a merge's two parents. Merges are applied in list order.
///
/// A merge whose result already exists as a token (reached earlier through a
/// different split) is kept as a rule but does not create a new id.
class Vocabulary {
 public:
  using Merge = std::pair<TokenId, TokenId>;

  /// The 256 single-byte tokens; base_size 256.
  Vocabulary();

  /// Appends a merge rule; returns the id of its result.
  TokenId add_merge(TokenId left, TokenId right);

  std::size_t size() const { return tokens_.size(); }
  std::size_t base_size() const { return base_size_; }
  void set_base_size(std::size_t n);
  const std::vector<Merge>& merges() const { return merges_; }
  const std::string& token_bytes(TokenId id) const;
  std::optional<TokenId> find(std::string_view bytes) const;

  /// Encodes with the first `merge_limit` merges only (all when unset).
  /// Whitespace runs and non-whitespace runs are encoded separately, so no
  /// token spans a whitespace boundary.
  std::vector<TokenId> encode(std::string_view text,
                              std::optional<std::size_t> merge_limit = std::nullopt) const;
  std::string decode(std::span<const TokenId> ids) const;

  /// FNV-1a over base size and the merge list, as 16 hex digits.
  std::string fingerprint() const;

 private:
  static std::uint64_t key(TokenId a, TokenId b) { return (std::uint64_t{a} << 32) | b; }
  void encode_chunk(std::string_view chunk, std::size_t limit, std::vector<TokenId>& out) const;

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> ids_;
  std::vector<Merge> merges_;
  // pair -> (rank, result)
  std::unordered_map<std::uint64_t, std::pair<std::uint32_t, TokenId>> ranks_;
  std::size_t base_size_ = 256;
};

/// Greedy BPE from the byte alphabet: repeatedly merges the most frequent
/// adjacent pair (overlapping occurrences counted) inside whitespace-free
/// chunks. Ties prefer the lexicographically smaller left token bytes, then
/// right. Stops early when no pair occurs at least twice. The result's
/// base_size equals its size. Negative `target_merges` is a ConfigError.
Vocabulary bpe_train(std::string_view corpus, long long target_merges);

struct ExtensionStats {
  std::size_t requested = 0;  // merges asked for
  std::size_t trained = 0;    // merges actually appended
  std::size_t added = 0;      // new token ids
  std::size_t duplicates = 0; // merges whose result already existed
};

struct ExtendedVocabulary {
  Vocabulary vocab;
  ExtensionStats stats;
};

/// floor(fraction * (base_tokens - reserved_tokens)), rounding-tolerant so
/// that 0.1 * 300 gives 30.
std::size_t extension_merge_count(std::size_t base_tokens, double fraction,
                                  std::size_t reserved_tokens = 0);

/// Continues BPE on `corpus`, starting from its segmentation under `base`.
/// New merges are appended after the base merges; base ids never change and
/// the result's base_size is the size of `base`.
ExtendedVocabulary extend_vocab(const Vocabulary& base, std::string_view corpus, double fraction,
                                std::size_t reserved_tokens = 0);

struct FertilityReport {
  std::string corpus_id;
  std::uint64_t token_count = 0;
  std::uint64_t word_count = 0;
  double fertility = 0.0;
};

/// Tokens per whitespace-delimited word, each word encoded on its own.
FertilityReport fertility(const Vocabulary& vocab, std::string_view corpus,
                          std::string corpus_id = "");

/// Plain-text vocabulary file:
///   cptlab-vocab v1
///   base_size <n>
///   merges <n>
///   hash <16 hex>
///   <escaped left> <escaped right>     (one line per merge)
std::string serialize_vocabulary(const Vocabulary& vocab);
Vocabulary parse_vocabulary(std::string_view text);
void save_vocabulary(const Vocabulary& vocab, const std::filesystem::path& path);
Vocabulary load_vocabulary(const std::filesystem::path& path);

/// Seeds for embedding extension: every token of `extended` at or above
/// `base.size()` mapped to its encoding under `base`.
std::map<TokenId, std::vector<TokenId>> new_token_constituents(const Vocabulary& base,
                                                               const Vocabulary& extended);

}  // namespace cptlab
