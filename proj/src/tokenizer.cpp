// SPDX-License-Identifier: Apache-2.0
#include "cptlab/tokenizer.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <limits>
#include <map>

#include "cptlab/error.hpp"
#include "cptlab/text.hpp"

namespace cptlab {

Vocabulary::Vocabulary() {
  tokens_.reserve(256);
  for (int b = 0; b < 256; ++b) {
    tokens_.emplace_back(1, static_cast<char>(b));
    ids_.emplace(tokens_.back(), static_cast<TokenId>(b));
  }
}

TokenId Vocabulary::add_merge(TokenId left, TokenId right) {
  if (left >= tokens_.size() || right >= tokens_.size()) {
    throw IndexError(fmt::format("merge ({}, {}) refers to unknown tokens", left, right));
  }
  if (ranks_.contains(key(left, right))) {
    throw StateError(fmt::format("merge ({}, {}) is already present", left, right));
  }
  std::string joined = tokens_[left] + tokens_[right];
  TokenId result;
  if (auto it = ids_.find(joined); it != ids_.end()) {
    result = it->second;
  } else {
    result = static_cast<TokenId>(tokens_.size());
    ids_.emplace(joined, result);
    tokens_.push_back(std::move(joined));
  }
  ranks_.emplace(key(left, right), std::make_pair(static_cast<std::uint32_t>(merges_.size()), result));
  merges_.emplace_back(left, right);
  return result;
}

void Vocabulary::set_base_size(std::size_t n) {
  if (n < 256 || n > tokens_.size()) {
    throw RangeError(fmt::format("base_size {} outside [256, {}]", n, tokens_.size()));
  }
  base_size_ = n;
}

const std::string& Vocabulary::token_bytes(TokenId id) const {
  if (id >= tokens_.size()) {
    throw IndexError(fmt::format("token id {} outside vocabulary of {}", id, tokens_.size()));
  }
  return tokens_[id];
}

std::optional<TokenId> Vocabulary::find(std::string_view bytes) const {
  auto it = ids_.find(std::string(bytes));
  if (it == ids_.end()) return std::nullopt;
  return it->second;
}

namespace {

/// Alternating runs of whitespace and non-whitespace bytes.
std::vector<std::string_view> pretokenize(std::string_view text) {
  std::vector<std::string_view> chunks;
  std::size_t i = 0;
  while (i < text.size()) {
    const bool space = is_space_byte(static_cast<unsigned char>(text[i]));
    std::size_t j = i + 1;
    while (j < text.size() && is_space_byte(static_cast<unsigned char>(text[j])) == space) ++j;
    chunks.push_back(text.substr(i, j - i));
    i = j;
  }
  return chunks;
}

}  // namespace

void Vocabulary::encode_chunk(std::string_view chunk, std::size_t limit,
                              std::vector<TokenId>& out) const {
  std::vector<TokenId> syms;
  syms.reserve(chunk.size());
  for (unsigned char c : chunk) syms.push_back(c);
  while (syms.size() > 1) {
    std::uint32_t best_rank = std::numeric_limits<std::uint32_t>::max();
    TokenId best_left = 0, best_right = 0, result = 0;
    for (std::size_t i = 0; i + 1 < syms.size(); ++i) {
      auto it = ranks_.find(key(syms[i], syms[i + 1]));
      if (it != ranks_.end() && it->second.first < best_rank && it->second.first < limit) {
        best_rank = it->second.first;
        best_left = syms[i];
        best_right = syms[i + 1];
        result = it->second.second;
      }
    }
    if (best_rank == std::numeric_limits<std::uint32_t>::max()) break;
    std::vector<TokenId> next;
    next.reserve(syms.size());
    for (std::size_t i = 0; i < syms.size();) {
      if (i + 1 < syms.size() && syms[i] == best_left && syms[i + 1] == best_right) {
        next.push_back(result);
        i += 2;
      } else {
        next.push_back(syms[i]);
        ++i;
      }
    }
    syms = std::move(next);
  }
  out.insert(out.end(), syms.begin(), syms.end());
}

std::vector<TokenId> Vocabulary::encode(std::string_view text,
                                        std::optional<std::size_t> merge_limit) const {
  const std::size_t limit = std::min(merge_limit.value_or(merges_.size()), merges_.size());
  std::vector<TokenId> out;
  out.reserve(text.size());
  for (auto chunk : pretokenize(text)) encode_chunk(chunk, limit, out);
  return out;
}

std::string Vocabulary::decode(std::span<const TokenId> ids) const {
  std::string out;
  for (auto id : ids) out += token_bytes(id);
  return out;
}

namespace {

std::string merge_lines(const Vocabulary& v) {
  std::string body;
  for (const auto& [l, r] : v.merges()) {
    body += escape_bytes(v.token_bytes(l));
    body += ' ';
    body += escape_bytes(v.token_bytes(r));
    body += '\n';
  }
  return body;
}

}  // namespace

std::string Vocabulary::fingerprint() const {
  return hex64(fnv1a64(fmt::format("{}\n{}", base_size_, merge_lines(*this))));
}

// ---------------------------------------------------------------------------
// Training

namespace {

class PairTrainer {
 public:
  PairTrainer(Vocabulary& vocab, std::string_view corpus) : vocab_(vocab) {
    std::map<std::string_view, long long> counts;
    for (auto chunk : pretokenize(corpus)) ++counts[chunk];
    words_.reserve(counts.size());
    for (const auto& [chunk, n] : counts) {
      words_.push_back(Word{vocab_.encode(chunk), n});
      update_pairs(words_.size() - 1, +1);
    }
  }

  /// Runs up to `n` merges; returns how many were trained.
  std::size_t train(std::size_t n, ExtensionStats* stats) {
    std::size_t done = 0;
    for (; done < n; ++done) {
      auto best = best_pair();
      if (!best) break;
      const auto left = static_cast<TokenId>(*best >> 32);
      const auto right = static_cast<TokenId>(*best & 0xffffffffULL);
      const std::size_t before = vocab_.size();
      const TokenId result = vocab_.add_merge(left, right);
      if (stats) {
        (vocab_.size() > before ? stats->added : stats->duplicates) += 1;
      }
      apply(*best, left, right, result);
    }
    return done;
  }

 private:
  struct Word {
    std::vector<TokenId> syms;
    long long count;
  };

  static std::uint64_t key(TokenId a, TokenId b) { return (std::uint64_t{a} << 32) | b; }

  void update_pairs(std::size_t w, int sign) {
    const auto& word = words_[w];
    for (std::size_t i = 0; i + 1 < word.syms.size(); ++i) {
      const auto k = key(word.syms[i], word.syms[i + 1]);
      auto& c = pair_counts_[k];
      c += sign * word.count;
      if (sign > 0) pair_words_[k].push_back(w);
      if (c == 0) pair_counts_.erase(k);
    }
  }

  std::optional<std::uint64_t> best_pair() const {
    std::optional<std::uint64_t> best;
    long long best_count = 0;
    for (const auto& [k, c] : pair_counts_) {
      if (c < 2 || c < best_count) continue;
      if (c > best_count || prefer(k, *best)) {
        best = k;
        best_count = c;
      }
    }
    return best;
  }

  bool prefer(std::uint64_t a, std::uint64_t b) const {
    const auto& al = vocab_.token_bytes(static_cast<TokenId>(a >> 32));
    const auto& bl = vocab_.token_bytes(static_cast<TokenId>(b >> 32));
    if (al != bl) return al < bl;
    return vocab_.token_bytes(static_cast<TokenId>(a & 0xffffffffULL)) <
           vocab_.token_bytes(static_cast<TokenId>(b & 0xffffffffULL));
  }

  void apply(std::uint64_t pair, TokenId left, TokenId right, TokenId result) {
    auto it = pair_words_.find(pair);
    if (it == pair_words_.end()) return;
    auto candidates = std::move(it->second);
    pair_words_.erase(it);
    std::sort(candidates.begin(), candidates.end());
    candidates.erase(std::unique(candidates.begin(), candidates.end()), candidates.end());
    for (auto w : candidates) {
      auto& syms = words_[w].syms;
      bool present = false;
      for (std::size_t i = 0; i + 1 < syms.size() && !present; ++i)
        present = syms[i] == left && syms[i + 1] == right;
      if (!present) continue;
      update_pairs(w, -1);
      std::vector<TokenId> next;
      next.reserve(syms.size());
      for (std::size_t i = 0; i < syms.size();) {
        if (i + 1 < syms.size() && syms[i] == left && syms[i + 1] == right) {
          next.push_back(result);
          i += 2;
        } else {
          next.push_back(syms[i++]);
        }
      }
      syms = std::move(next);
      update_pairs(w, +1);
    }
  }

  Vocabulary& vocab_;
  std::vector<Word> words_;
  std::unordered_map<std::uint64_t, long long> pair_counts_;
  std::unordered_map<std::uint64_t, std::vector<std::size_t>> pair_words_;
};

void require_corpus(std::string_view corpus) {
  if (corpus.empty()) throw DataError("corpus is empty");
  if (!is_valid_utf8(corpus)) throw DataError("corpus is not valid UTF-8");
}

}  // namespace

Vocabulary bpe_train(std::string_view corpus, long long target_merges) {
  if (target_merges < 0) {
    throw ConfigError(fmt::format("target_merges must be non-negative, got {}", target_merges));
  }
  require_corpus(corpus);
  Vocabulary vocab;
  PairTrainer trainer(vocab, corpus);
  trainer.train(static_cast<std::size_t>(target_merges), nullptr);
  vocab.set_base_size(vocab.size());
  return vocab;
}

std::size_t extension_merge_count(std::size_t base_tokens, double fraction,
                                  std::size_t reserved_tokens) {
  if (!(fraction > 0.0 && fraction <= 1.0)) {
    throw ConfigError(fmt::format("extension fraction {} outside (0, 1]", fraction));
  }
  if (reserved_tokens > base_tokens) throw ConfigError("more reserved tokens than base tokens");
  const long double exact =
      static_cast<long double>(fraction) * static_cast<long double>(base_tokens - reserved_tokens);
  const long double nearest = std::nearbyint(exact);
  if (std::fabs(exact - nearest) <= 1e-9L * std::max<long double>(1.0L, exact)) {
    return static_cast<std::size_t>(nearest);
  }
  return static_cast<std::size_t>(std::floor(exact));
}

ExtendedVocabulary extend_vocab(const Vocabulary& base, std::string_view corpus, double fraction,
                                std::size_t reserved_tokens) {
  require_corpus(corpus);
  ExtendedVocabulary out{base, {}};
  out.stats.requested = extension_merge_count(base.size(), fraction, reserved_tokens);
  out.vocab.set_base_size(base.size());
  if (out.stats.requested == 0) {
    out.vocab = base;
    return out;
  }
  PairTrainer trainer(out.vocab, corpus);
  out.stats.trained = trainer.train(out.stats.requested, &out.stats);
  return out;
}

FertilityReport fertility(const Vocabulary& vocab, std::string_view corpus, std::string corpus_id) {
  FertilityReport report;
  report.corpus_id = std::move(corpus_id);
  for (auto word : split_words(corpus)) {
    report.token_count += vocab.encode(word).size();
    ++report.word_count;
  }
  if (report.word_count == 0) throw DataError("fertility: corpus holds no words");
  report.fertility =
      static_cast<double>(report.token_count) / static_cast<double>(report.word_count);
  return report;
}

// ---------------------------------------------------------------------------
// Files

std::string serialize_vocabulary(const Vocabulary& vocab) {
  return fmt::format("cptlab-vocab v1\nbase_size {}\nmerges {}\nhash {}\n{}", vocab.base_size(),
                     vocab.merges().size(), vocab.fingerprint(), merge_lines(vocab));
}

namespace {

std::size_t parse_count(std::string_view line, std::string_view field) {
  if (line.substr(0, field.size() + 1) != fmt::format("{} ", field)) {
    throw FormatError(fmt::format("vocabulary: expected '{}' line, got '{}'", field, line));
  }
  auto digits = line.substr(field.size() + 1);
  std::size_t value = 0;
  auto [ptr, ec] = std::from_chars(digits.data(), digits.data() + digits.size(), value);
  if (ec != std::errc() || ptr != digits.data() + digits.size()) {
    throw FormatError(fmt::format("vocabulary: bad {} value '{}'", field, digits));
  }
  return value;
}

}  // namespace

Vocabulary parse_vocabulary(std::string_view text) {
  std::vector<std::string_view> lines;
  std::size_t pos = 0;
  while (pos < text.size()) {
    auto nl = text.find('\n', pos);
    if (nl == std::string_view::npos) throw FormatError("vocabulary: missing final newline");
    lines.push_back(text.substr(pos, nl - pos));
    pos = nl + 1;
  }
  if (lines.size() < 4 || lines[0] != "cptlab-vocab v1") {
    throw FormatError("vocabulary: missing 'cptlab-vocab v1' header");
  }
  const auto base_size = parse_count(lines[1], "base_size");
  const auto n_merges = parse_count(lines[2], "merges");
  if (lines[3].substr(0, 5) != "hash ") throw FormatError("vocabulary: missing hash line");
  const auto hash = lines[3].substr(5);
  if (lines.size() != 4 + n_merges) {
    throw FormatError(fmt::format("vocabulary: header promises {} merges, file has {}", n_merges,
                                  lines.size() - 4));
  }
  Vocabulary vocab;
  for (std::size_t i = 0; i < n_merges; ++i) {
    const auto line = lines[4 + i];
    const auto space = line.find(' ');
    if (space == std::string_view::npos || line.find(' ', space + 1) != std::string_view::npos) {
      throw FormatError(fmt::format("vocabulary: merge line {} is malformed", i + 1));
    }
    const auto left = vocab.find(unescape_bytes(line.substr(0, space)));
    const auto right = vocab.find(unescape_bytes(line.substr(space + 1)));
    if (!left || !right) {
      throw FormatError(fmt::format("vocabulary: merge line {} uses an unknown token", i + 1));
    }
    vocab.add_merge(*left, *right);
  }
  vocab.set_base_size(base_size);
  if (vocab.fingerprint() != hash) {
    throw FormatError(fmt::format("vocabulary: content hash {} does not match header {}",
                                  vocab.fingerprint(), hash));
  }
  return vocab;
}

void save_vocabulary(const Vocabulary& vocab, const std::filesystem::path& path) {
  write_file_atomic(path, serialize_vocabulary(vocab));
}

Vocabulary load_vocabulary(const std::filesystem::path& path) {
  return parse_vocabulary(read_file(path));
}

std::map<TokenId, std::vector<TokenId>> new_token_constituents(const Vocabulary& base,
                                                               const Vocabulary& extended) {
  if (extended.size() < base.size()) throw PlanError("extended vocabulary is smaller than its base");
  for (std::size_t id = 0; id < base.size(); ++id) {
    const auto tid = static_cast<TokenId>(id);
    if (extended.token_bytes(tid) != base.token_bytes(tid)) {
      throw PlanError(fmt::format("token {} differs between base and extended vocabularies", id));
    }
  }
  std::map<TokenId, std::vector<TokenId>> seeds;
  for (std::size_t id = base.size(); id < extended.size(); ++id) {
    const auto tid = static_cast<TokenId>(id);
    seeds.emplace(tid, base.encode(extended.token_bytes(tid)));
  }
  return seeds;
}

}  // namespace cptlab
