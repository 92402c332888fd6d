// SPDX-License-Identifier: Apache-2.0
#include "cptlab/langid.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <istream>
#include <ostream>
#include <set>

#include "cptlab/error.hpp"
#include "cptlab/text.hpp"

namespace cptlab {
namespace {

// Byte offsets of code-point starts in a valid UTF-8 string, plus the end.
std::vector<std::size_t> code_point_offsets(std::string_view s) {
  std::vector<std::size_t> offsets;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if ((static_cast<unsigned char>(s[i]) & 0xc0) != 0x80) offsets.push_back(i);
  }
  offsets.push_back(s.size());
  return offsets;
}

void validate_range(NgramRange range) {
  if (range.min_n == 0 || range.min_n > range.max_n) {
    throw DataError(fmt::format("n-gram range {}..{} is invalid", range.min_n, range.max_n));
  }
}

}  // namespace

std::vector<std::string> extract_ngrams(std::string_view text, NgramRange range) {
  std::vector<std::string> grams;
  for (auto word : split_words(text)) {
    const std::string padded = fmt::format(" {} ", word);
    const auto offsets = code_point_offsets(padded);
    const std::size_t chars = offsets.size() - 1;
    for (std::size_t n = range.min_n; n <= range.max_n; ++n) {
      for (std::size_t i = 0; i + n <= chars; ++i) {
        if (n == 1 && padded[offsets[i]] == ' ') continue;
        grams.emplace_back(padded.substr(offsets[i], offsets[i + n] - offsets[i]));
      }
    }
  }
  return grams;
}

std::vector<LangProfile> train_classifier(const std::vector<LabeledLine>& labeled,
                                          NgramRange range) {
  validate_range(range);
  const std::size_t orders = range.max_n - range.min_n + 1;
  // tag -> ngram -> count, and per-order totals.
  std::map<std::string, std::unordered_map<std::string, std::uint64_t>> counts;
  std::map<std::string, std::vector<std::uint64_t>> totals;
  std::map<std::string, std::uint64_t> sentences;
  std::vector<std::set<std::string>> distinct(orders);

  for (const auto& line : labeled) {
    if (!is_valid_utf8(line.text)) {
      throw DataError(fmt::format("training line for '{}' is not valid UTF-8", line.tag));
    }
    auto& table = counts[line.tag];
    auto& tot = totals[line.tag];
    tot.resize(orders, 0);
    ++sentences[line.tag];
    for (auto& g : extract_ngrams(line.text, range)) {
      const auto order = code_point_offsets(g).size() - 1 - range.min_n;
      ++tot[order];
      distinct[order].insert(g);
      ++table[std::move(g)];
    }
  }
  if (counts.size() < 2) {
    throw TrainingError(fmt::format("language identification needs at least two tags, got {}",
                                counts.size()));
  }

  std::vector<LangProfile> profiles;
  for (const auto& [tag, table] : counts) {
    LangProfile p;
    p.tag = tag;
    p.range = range;
    p.sentences = sentences[tag];
    p.prior = static_cast<double>(p.sentences) / static_cast<double>(labeled.size());
    std::vector<double> denom(orders);
    for (std::size_t o = 0; o < orders; ++o) {
      denom[o] = static_cast<double>(totals[tag][o] + distinct[o].size() + 1);
      p.unseen_log_prob.push_back(-std::log(denom[o]));
    }
    for (const auto& [g, c] : table) {
      const auto order = code_point_offsets(g).size() - 1 - range.min_n;
      p.log_prob.emplace(g, std::log(static_cast<double>(c + 1) / denom[order]));
    }
    profiles.push_back(std::move(p));
  }
  return profiles;
}

Classification classify(const std::vector<LangProfile>& profiles, std::string_view text) {
  if (profiles.empty()) throw StateError("classify: no trained profiles");
  Classification out;
  const auto grams = extract_ngrams(text, profiles.front().range);
  for (const auto& p : profiles) {
    double score = std::log(p.prior);
    for (const auto& g : grams) {
      auto it = p.log_prob.find(g);
      if (it != p.log_prob.end()) {
        score += it->second;
      } else {
        score += p.unseen_log_prob[code_point_offsets(g).size() - 1 - p.range.min_n];
      }
    }
    out.scores.emplace(p.tag, score);
  }
  // std::map iterates tags in lexicographic order; strict comparison keeps
  // the smallest tag on ties.
  double best = -INFINITY, runner_up = -INFINITY;
  for (const auto& [tag, score] : out.scores) {
    if (out.predicted.empty() || score > best) {
      runner_up = best;
      best = score;
      out.predicted = tag;
    } else if (score > runner_up) {
      runner_up = score;
    }
  }
  out.margin = out.scores.size() > 1 ? best - runner_up : 0.0;
  return out;
}

FilterCounts filter_corpus(const std::vector<LangProfile>& profiles, std::istream& input,
                           std::ostream& kept, std::ostream& rejected, const std::string& target,
                           double margin_threshold) {
  if (!(margin_threshold >= 0.0)) throw ConfigError("margin threshold must be >= 0");
  FilterCounts counts;
  std::string line;
  while (std::getline(input, line)) {
    ++counts.lines;
    if (!is_valid_utf8(line)) {
      throw IoError(fmt::format("input line {} is not valid UTF-8", counts.lines));
    }
    const auto c = classify(profiles, line);
    if (c.predicted == target && c.margin >= margin_threshold) {
      kept << line << '\n';
      ++counts.kept;
    } else {
      rejected << line << '\n';
      ++counts.rejected;
      ++counts.rejected_by_tag[c.predicted];
    }
  }
  if (input.bad()) throw IoError(fmt::format("read failed at input line {}", counts.lines + 1));
  return counts;
}

AuditResult audit(const std::vector<LangProfile>& profiles, const std::vector<LabeledLine>& labeled,
                  const std::string& target, double margin_threshold) {
  AuditResult r;
  std::uint64_t correct = 0, tp = 0, predicted_pos = 0, actual_pos = 0;
  for (const auto& item : labeled) {
    const auto c = classify(profiles, item.text);
    const bool pos = c.predicted == target && c.margin >= margin_threshold;
    correct += c.predicted == item.tag;
    predicted_pos += pos;
    actual_pos += item.tag == target;
    tp += pos && item.tag == target;
  }
  r.items = labeled.size();
  if (r.items > 0) r.accuracy = static_cast<double>(correct) / static_cast<double>(r.items);
  if (predicted_pos > 0) r.precision = static_cast<double>(tp) / static_cast<double>(predicted_pos);
  if (actual_pos > 0) r.recall = static_cast<double>(tp) / static_cast<double>(actual_pos);
  return r;
}

// ---------------------------------------------------------------------------
// Profile files
//
//   cptlab-langid v1
//   profiles <count>
//   profile <tag> <min_n> <max_n> <prior> <sentences> <entries>
//   unseen <w_min> ... <w_max>
//   <escaped ngram> <weight>          (entries lines, sorted by n-gram bytes)
//
// Weights are printed with 17 significant digits, which reproduces each
// double exactly.

namespace {

std::string format_double(double v) { return fmt::format("{:.17g}", v); }

double parse_double(std::string_view s) {
  // std::from_chars for double is not available on every toolchain we target.
  const std::string copy(s);
  char* end = nullptr;
  const double v = std::strtod(copy.c_str(), &end);
  if (copy.empty() || end != copy.c_str() + copy.size()) {
    throw FormatError(fmt::format("langid profile: bad number '{}'", s));
  }
  return v;
}

std::uint64_t parse_u64(std::string_view s) {
  std::uint64_t v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) {
    throw FormatError(fmt::format("langid profile: bad integer '{}'", s));
  }
  return v;
}

std::vector<std::string_view> fields(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t pos = 0;
  while (pos <= line.size()) {
    auto sp = line.find(' ', pos);
    if (sp == std::string_view::npos) sp = line.size();
    out.push_back(line.substr(pos, sp - pos));
    pos = sp + 1;
  }
  return out;
}

}  // namespace

std::string serialize_profiles(const std::vector<LangProfile>& profiles) {
  std::string out = fmt::format("cptlab-langid v1\nprofiles {}\n", profiles.size());
  for (const auto& p : profiles) {
    out += fmt::format("profile {} {} {} {} {} {}\n", escape_bytes(p.tag), p.range.min_n,
                       p.range.max_n, format_double(p.prior), p.sentences, p.log_prob.size());
    out += "unseen";
    for (double w : p.unseen_log_prob) out += " " + format_double(w);
    out += '\n';
    std::vector<std::pair<std::string, double>> entries(p.log_prob.begin(), p.log_prob.end());
    std::sort(entries.begin(), entries.end());
    for (const auto& [g, w] : entries) out += fmt::format("{} {}\n", escape_bytes(g), format_double(w));
  }
  return out;
}

std::vector<LangProfile> parse_profiles(std::string_view text) {
  std::vector<std::string_view> lines;
  std::size_t pos = 0;
  while (pos < text.size()) {
    auto nl = text.find('\n', pos);
    if (nl == std::string_view::npos) nl = text.size();
    lines.push_back(text.substr(pos, nl - pos));
    pos = nl + 1;
  }
  std::size_t li = 0;
  auto next = [&]() -> std::string_view {
    if (li >= lines.size()) throw FormatError("langid profile: unexpected end of file");
    return lines[li++];
  };
  if (next() != "cptlab-langid v1") throw FormatError("langid profile: missing version header");
  auto head = fields(next());
  if (head.size() != 2 || head[0] != "profiles") throw FormatError("langid profile: bad count line");
  const auto n = parse_u64(head[1]);
  std::vector<LangProfile> profiles;
  for (std::uint64_t k = 0; k < n; ++k) {
    auto f = fields(next());
    if (f.size() != 7 || f[0] != "profile") throw FormatError("langid profile: bad profile line");
    LangProfile p;
    p.tag = unescape_bytes(f[1]);
    p.range = {parse_u64(f[2]), parse_u64(f[3])};
    validate_range(p.range);
    p.prior = parse_double(f[4]);
    p.sentences = parse_u64(f[5]);
    const auto entries = parse_u64(f[6]);
    auto u = fields(next());
    if (u.size() != p.range.max_n - p.range.min_n + 2 || u[0] != "unseen") {
      throw FormatError("langid profile: bad unseen line");
    }
    for (std::size_t i = 1; i < u.size(); ++i) p.unseen_log_prob.push_back(parse_double(u[i]));
    for (std::uint64_t e = 0; e < entries; ++e) {
      auto g = fields(next());
      if (g.size() != 2) throw FormatError(fmt::format("langid profile: bad entry at line {}", li));
      const double w = parse_double(g[1]);
      if (!std::isfinite(w)) throw FormatError("langid profile: non-finite weight");
      p.log_prob.emplace(unescape_bytes(g[0]), w);
    }
    profiles.push_back(std::move(p));
  }
  if (profiles.size() < 2) throw FormatError("langid profile: need at least two languages");
  return profiles;
}

void save_profiles(const std::vector<LangProfile>& profiles, const std::filesystem::path& path) {
  write_file_atomic(path, serialize_profiles(profiles));
}

std::vector<LangProfile> load_profiles(const std::filesystem::path& path) {
  return parse_profiles(read_file(path));
}

std::vector<LabeledLine> read_labeled(const std::filesystem::path& path) {
  std::vector<LabeledLine> out;
  std::size_t n = 0;
  for (auto& line : read_lines(path)) {
    ++n;
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos || tab == 0) {
      throw FormatError(fmt::format("{}:{}: expected '<tag>\\t<text>'", path.string(), n));
    }
    out.push_back(LabeledLine{line.substr(tab + 1), line.substr(0, tab)});
  }
  return out;
}

}  // namespace cptlab
