// SPDX-License-Identifier: Apache-2.0
#include "cptlab/mixer.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <charconv>
#include <cmath>

#include "cptlab/error.hpp"
#include "cptlab/rng.hpp"
#include "cptlab/text.hpp"

namespace cptlab {

using i128 = __int128;

void MixSpec::validate() const {
  if (total_tokens <= 0) throw ConfigError(fmt::format("mix: total_tokens {} must be positive", total_tokens));
  if (ratios.empty()) throw ConfigError("mix: no languages given");
  for (const auto& [tag, w] : ratios) {
    if (!(w > 0.0) || !std::isfinite(w)) {
      throw ConfigError(fmt::format("mix: weight for '{}' must be positive, got {}", tag, w));
    }
  }
}

namespace {

struct Share {
  std::int64_t whole = 0;
  // Fractional part as num/den, compared across languages by cross-multiplying.
  i128 num = 0;
  i128 den = 1;
};

bool all_integral(const std::map<std::string, double>& ratios) {
  return std::all_of(ratios.begin(), ratios.end(), [](const auto& kv) {
    return kv.second == std::floor(kv.second) && kv.second <= 9007199254740992.0;
  });
}

// Largest-remainder apportionment of `total` over the given shares.
Allocation settle(std::int64_t total, const std::vector<std::string>& tags, std::vector<Share> shares) {
  std::int64_t assigned = 0;
  for (const auto& s : shares) assigned += s.whole;
  std::vector<std::size_t> order(tags.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return shares[a].num * shares[b].den > shares[b].num * shares[a].den;
  });
  for (std::size_t k = 0; assigned < total; ++k) {
    shares[order[k % order.size()]].whole += 1;
    ++assigned;
  }
  Allocation out;
  for (std::size_t i = 0; i < tags.size(); ++i) out.emplace(tags[i], shares[i].whole);
  return out;
}

}  // namespace

Allocation plan_mix(const MixSpec& spec) {
  spec.validate();
  std::vector<std::string> tags;
  std::vector<Share> shares;
  if (all_integral(spec.ratios)) {
    i128 sum = 0;
    for (const auto& [tag, w] : spec.ratios) sum += static_cast<i128>(w);
    for (const auto& [tag, w] : spec.ratios) {
      const i128 num = static_cast<i128>(spec.total_tokens) * static_cast<i128>(w);
      tags.push_back(tag);
      shares.push_back(Share{static_cast<std::int64_t>(num / sum), num % sum, sum});
    }
  } else {
    long double sum = 0;
    for (const auto& [tag, w] : spec.ratios) sum += w;
    constexpr i128 kScale = i128{1} << 60;
    for (const auto& [tag, w] : spec.ratios) {
      const long double exact = static_cast<long double>(spec.total_tokens) * w / sum;
      const long double whole = std::floor(exact);
      tags.push_back(tag);
      shares.push_back(Share{static_cast<std::int64_t>(whole),
                             static_cast<i128>((exact - whole) * static_cast<long double>(kScale)),
                             kScale});
    }
  }
  return settle(spec.total_tokens, tags, std::move(shares));
}

std::int64_t MixPlan::total() const {
  std::int64_t t = 0;
  for (const auto& p : phases) t += p.budget;
  return t;
}

Allocation MixPlan::language_totals() const {
  Allocation out;
  for (const auto& p : phases)
    for (const auto& [tag, n] : p.allocation) out[tag] += n;
  return out;
}

std::int64_t phase_boundary(double fraction, std::int64_t total, std::int64_t granularity) {
  if (granularity <= 0) throw ConfigError("curriculum granularity must be positive");
  if (fraction <= 0.0) return 0;
  if (fraction >= 1.0) return total;
  const std::int64_t units = (total + granularity - 1) / granularity;
  const long double exact = static_cast<long double>(fraction) * static_cast<long double>(units);
  const long double nearest = std::nearbyint(exact);
  const long double snapped =
      std::fabs(exact - nearest) <= 1e-9L * std::max<long double>(1.0L, exact) ? nearest
                                                                               : std::ceil(exact);
  return std::min(total, static_cast<std::int64_t>(snapped) * granularity);
}

MixPlan build_curriculum(const std::vector<Phase>& phases, std::int64_t total_tokens,
                         std::int64_t granularity) {
  if (total_tokens <= 0) throw ConfigError("curriculum: total_tokens must be positive");
  if (phases.empty()) throw CurriculumError("curriculum: no phases");
  if (phases.front().start_fraction != 0.0) {
    throw CurriculumError(fmt::format("curriculum: first phase starts at {}, not 0",
                                      phases.front().start_fraction));
  }
  if (phases.back().end_fraction != 1.0) {
    throw CurriculumError(fmt::format("curriculum: last phase ends at {}, not 1",
                                      phases.back().end_fraction));
  }
  for (std::size_t i = 0; i < phases.size(); ++i) {
    if (!(phases[i].start_fraction < phases[i].end_fraction)) {
      throw CurriculumError(fmt::format("curriculum: phase {} is empty or reversed ({} to {})", i,
                                        phases[i].start_fraction, phases[i].end_fraction));
    }
    if (i > 0 && phases[i].start_fraction != phases[i - 1].end_fraction) {
      throw CurriculumError(fmt::format("curriculum: {} between phase {} (ends {}) and phase {} "
                                        "(starts {})",
                                        phases[i].start_fraction > phases[i - 1].end_fraction
                                            ? "gap"
                                            : "overlap",
                                        i - 1, phases[i - 1].end_fraction, i,
                                        phases[i].start_fraction));
    }
  }
  MixPlan plan;
  for (const auto& ph : phases) {
    PhasePlan pp;
    pp.start_fraction = ph.start_fraction;
    pp.end_fraction = ph.end_fraction;
    pp.budget = phase_boundary(ph.end_fraction, total_tokens, granularity) -
                phase_boundary(ph.start_fraction, total_tokens, granularity);
    if (pp.budget > 0) pp.allocation = plan_mix(MixSpec{pp.budget, ph.ratios});
    plan.phases.push_back(std::move(pp));
  }
  return plan;
}

MixPlan staged_curriculum(const Allocation& sizes, const std::string& late_language,
                          double late_start, std::int64_t granularity) {
  if (!sizes.contains(late_language)) {
    throw CurriculumError(fmt::format("curriculum: late language '{}' has no declared size",
                                      late_language));
  }
  if (!(late_start > 0.0 && late_start < 1.0)) {
    throw CurriculumError(fmt::format("curriculum: late phase start {} outside (0, 1)", late_start));
  }
  std::int64_t total = 0;
  std::map<std::string, double> early;
  for (const auto& [tag, n] : sizes) {
    if (n <= 0) throw ConfigError(fmt::format("curriculum: size of '{}' must be positive", tag));
    total += n;
    if (tag != late_language) early.emplace(tag, static_cast<double>(n));
  }
  if (early.empty()) throw CurriculumError("curriculum: no language for the first phase");

  MixPlan plan;
  PhasePlan first{0.0, late_start, phase_boundary(late_start, total, granularity), {}};
  first.allocation = plan_mix(MixSpec{first.budget, early});
  PhasePlan second{late_start, 1.0, total - first.budget, {}};
  for (const auto& [tag, n] : sizes) {
    const std::int64_t used = first.allocation.contains(tag) ? first.allocation.at(tag) : 0;
    if (used > n) {
      throw CurriculumError(fmt::format("curriculum: first phase needs {} tokens of '{}', only {} "
                                        "declared",
                                        used, tag, n));
    }
    second.allocation.emplace(tag, n - used);
  }
  plan.phases = {std::move(first), std::move(second)};
  return plan;
}

RepetitionPlan upsample(std::int64_t corpus_tokens, std::int64_t target_tokens) {
  if (target_tokens < 0) throw ConfigError(fmt::format("upsample: target {} is negative", target_tokens));
  if (corpus_tokens <= 0) throw DataError("upsample: corpus is empty");
  return RepetitionPlan{target_tokens / corpus_tokens, target_tokens % corpus_tokens};
}

// ---------------------------------------------------------------------------

QuotaCursor::QuotaCursor(const PhasePlan& phase) : allocation_(phase.allocation), budget_(phase.budget) {
  std::int64_t sum = 0;
  for (const auto& [tag, n] : allocation_) {
    sum += n;
    assigned_[tag] = 0;
  }
  if (sum != budget_) {
    throw PlanError(fmt::format("phase allocations sum to {}, budget is {}", sum, budget_));
  }
}

Allocation QuotaCursor::next(std::int64_t batch_tokens) {
  if (batch_tokens <= 0) throw ConfigError("batch size must be positive");
  const std::int64_t c = std::min(budget_, consumed_ + batch_tokens);
  // Cumulative targets: at least floor(c * a_i / P), at most its ceiling,
  // never below what was already handed out.
  Allocation target;
  std::map<std::string, i128> remainder;
  std::int64_t sum = 0;
  for (const auto& [tag, a] : allocation_) {
    const i128 num = static_cast<i128>(c) * a;
    const auto floor_share = static_cast<std::int64_t>(num / budget_);
    remainder[tag] = num % budget_;
    target[tag] = std::max(assigned_[tag], floor_share);
    sum += target[tag];
  }
  if (sum > c) throw StateError("quota cursor overshot its cumulative budget");
  while (sum < c) {
    const std::string* pick = nullptr;
    for (const auto& [tag, a] : allocation_) {
      const i128 num = static_cast<i128>(c) * a;
      const auto ceil_share = static_cast<std::int64_t>((num + budget_ - 1) / budget_);
      if (target[tag] >= ceil_share) continue;
      if (pick == nullptr || remainder[tag] > remainder[*pick]) pick = &tag;
    }
    if (pick == nullptr) throw StateError("quota cursor could not place remaining tokens");
    target[*pick] += 1;
    ++sum;
  }
  Allocation quota;
  for (const auto& [tag, n] : target) {
    quota[tag] = n - assigned_[tag];
    assigned_[tag] = n;
  }
  consumed_ = c;
  return quota;
}

std::int64_t Batch::token_count() const {
  std::int64_t n = 0;
  for (const auto& s : sequences) n += static_cast<std::int64_t>(s.tokens.size());
  return n;
}

std::int64_t Shard::token_count() const {
  std::int64_t n = 0;
  for (const auto& d : documents) n += static_cast<std::int64_t>(d.size());
  return n;
}

BatchStream::Feed::Feed(const Shard& shard, std::int64_t needed, std::uint64_t seed, bool shuffle)
    : docs_(std::make_shared<const std::vector<std::vector<TokenId>>>(shard.documents)), language_(shard.language) {
  const std::int64_t have = shard.token_count();
  std::vector<std::size_t> natural(shard.documents.size());
  for (std::size_t i = 0; i < natural.size(); ++i) natural[i] = i;
  std::vector<std::size_t> shuffled = natural;
  if (shuffle) {
    Rng rng(seed);
    rng.shuffle(shuffled);
  }
  if (needed <= have) {
    order_ = shuffled;
    return;
  }
  if (!shard.upsample) {
    throw DataError(fmt::format("shard for '{}' holds {} tokens, plan needs {}", language_, have,
                                needed));
  }
  const auto rep = upsample(have, needed);
  for (std::int64_t p = 0; p < rep.passes; ++p) order_.insert(order_.end(), natural.begin(), natural.end());
  order_.insert(order_.end(), shuffled.begin(), shuffled.end());
}

std::vector<TokenId> BatchStream::Feed::take(std::int64_t n) {
  std::vector<TokenId> out;
  out.reserve(static_cast<std::size_t>(n));
  while (static_cast<std::int64_t>(out.size()) < n) {
    if (doc_ >= order_.size()) {
      throw DataError(fmt::format("shard for '{}' exhausted before the plan was satisfied", language_));
    }
    const auto& doc = (*docs_)[order_[doc_]];
    const std::size_t want = static_cast<std::size_t>(n) - out.size();
    const std::size_t avail = doc.size() - offset_;
    const std::size_t take = std::min(want, avail);
    out.insert(out.end(), doc.begin() + static_cast<std::ptrdiff_t>(offset_),
               doc.begin() + static_cast<std::ptrdiff_t>(offset_ + take));
    offset_ += take;
    if (offset_ == doc.size()) {
      ++doc_;
      offset_ = 0;
    }
  }
  return out;
}

BatchStream::BatchStream(MixPlan plan, const std::vector<Shard>& shards, StreamOptions options)
    : plan_(std::move(plan)), options_(options) {
  if (options_.batch_tokens <= 0 || options_.sequence_length == 0) {
    throw ConfigError("batch stream: batch_tokens and sequence_length must be positive");
  }
  const auto totals = plan_.language_totals();
  for (const auto& [tag, needed] : totals) {
    if (needed == 0) continue;
    const Shard* shard = nullptr;
    for (const auto& s : shards)
      if (s.language == tag) shard = &s;
    if (shard == nullptr) throw DataError(fmt::format("no shard for language '{}'", tag));
    feeds_.emplace(tag, Feed(*shard, needed, derive_seed(options_.seed, "shard:" + tag),
                             options_.shuffle_documents));
  }
  for (const auto& p : plan_.phases) {
    total_steps_ += static_cast<std::uint64_t>((p.budget + options_.batch_tokens - 1) /
                                               options_.batch_tokens);
  }
}

std::optional<Batch> BatchStream::next() {
  while (phase_ < plan_.phases.size()) {
    if (!cursor_) cursor_.emplace(plan_.phases[phase_]);
    if (!cursor_->done()) break;
    cursor_.reset();
    ++phase_;
  }
  if (phase_ >= plan_.phases.size()) return std::nullopt;

  Batch batch;
  batch.index = index_++;
  batch.phase = phase_;
  batch.composition = cursor_->next(options_.batch_tokens);
  const auto len = static_cast<std::int64_t>(options_.sequence_length);
  for (const auto& [tag, quota] : batch.composition) {
    if (quota == 0) continue;
    auto tokens = feeds_.at(tag).take(quota);
    for (std::int64_t start = 0; start < quota; start += len) {
      const auto end = std::min(quota, start + len);
      batch.sequences.push_back(Sequence{tag, std::vector<TokenId>(tokens.begin() + start,
                                                                   tokens.begin() + end)});
    }
  }
  return batch;
}

std::optional<std::uint64_t> first_batch_with(const MixPlan& plan, const std::string& language,
                                              std::int64_t batch_tokens) {
  std::uint64_t index = 0;
  for (const auto& phase : plan.phases) {
    const std::uint64_t batches =
        static_cast<std::uint64_t>((phase.budget + batch_tokens - 1) / batch_tokens);
    auto it = phase.allocation.find(language);
    if (it == phase.allocation.end() || it->second == 0) {
      index += batches;
      continue;
    }
    QuotaCursor cursor(phase);
    for (std::uint64_t b = 0; b < batches; ++b) {
      if (cursor.next(batch_tokens).at(language) > 0) return index + b;
    }
  }
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Manifest and plan files

namespace {

std::vector<std::string_view> split_tabs(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t pos = 0;
  while (true) {
    auto tab = line.find('\t', pos);
    out.push_back(line.substr(pos, tab == std::string_view::npos ? std::string_view::npos : tab - pos));
    if (tab == std::string_view::npos) break;
    pos = tab + 1;
  }
  return out;
}

std::vector<std::string_view> content_lines(std::string_view text) {
  std::vector<std::string_view> out;
  std::size_t pos = 0;
  while (pos < text.size()) {
    auto nl = text.find('\n', pos);
    if (nl == std::string_view::npos) nl = text.size();
    out.push_back(text.substr(pos, nl - pos));
    pos = nl + 1;
  }
  return out;
}

std::int64_t parse_i64(std::string_view s, std::string_view what) {
  std::int64_t v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) {
    throw FormatError(fmt::format("{}: bad integer '{}'", what, s));
  }
  return v;
}

double parse_fraction(std::string_view s) {
  const std::string copy(s);
  char* end = nullptr;
  const double v = std::strtod(copy.c_str(), &end);
  if (copy.empty() || end != copy.c_str() + copy.size()) {
    throw FormatError(fmt::format("plan: bad fraction '{}'", s));
  }
  return v;
}

}  // namespace

std::string serialize_manifest(const std::vector<ShardRecord>& records) {
  std::string out = "# cptlab-manifest v1\n# path\tlanguage\ttokens\thash\n";
  for (const auto& r : records) {
    out += fmt::format("{}\t{}\t{}\t{}\n", r.path.generic_string(), r.language, r.token_count,
                       r.content_hash);
  }
  return out;
}

std::vector<ShardRecord> parse_manifest(std::string_view text) {
  const auto lines = content_lines(text);
  if (lines.empty() || lines[0] != "# cptlab-manifest v1") {
    throw FormatError("manifest: missing '# cptlab-manifest v1' header");
  }
  std::vector<ShardRecord> out;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    if (lines[i].empty() || lines[i][0] == '#') continue;
    const auto f = split_tabs(lines[i]);
    if (f.size() != 4) throw FormatError(fmt::format("manifest line {}: expected 4 fields", i + 1));
    out.push_back(ShardRecord{std::filesystem::path(std::string(f[0])), std::string(f[1]),
                              parse_i64(f[2], "manifest"), std::string(f[3])});
  }
  return out;
}

std::string serialize_plan(const MixPlan& plan) {
  std::string out = "# cptlab-plan v1\n# phase\tstart\tend\tlanguage\ttokens\n";
  for (std::size_t i = 0; i < plan.phases.size(); ++i) {
    const auto& p = plan.phases[i];
    for (const auto& [tag, n] : p.allocation) {
      out += fmt::format("{}\t{:.17g}\t{:.17g}\t{}\t{}\n", i, p.start_fraction, p.end_fraction, tag, n);
    }
  }
  return out;
}

MixPlan parse_plan(std::string_view text) {
  const auto lines = content_lines(text);
  if (lines.empty() || lines[0] != "# cptlab-plan v1") {
    throw FormatError("plan: missing '# cptlab-plan v1' header");
  }
  MixPlan plan;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    if (lines[i].empty() || lines[i][0] == '#') continue;
    const auto f = split_tabs(lines[i]);
    if (f.size() != 5) throw FormatError(fmt::format("plan line {}: expected 5 fields", i + 1));
    const auto phase = static_cast<std::size_t>(parse_i64(f[0], "plan"));
    if (phase > plan.phases.size()) throw FormatError(fmt::format("plan line {}: phase out of order", i + 1));
    if (phase == plan.phases.size()) {
      plan.phases.push_back(PhasePlan{parse_fraction(f[1]), parse_fraction(f[2]), 0, {}});
    }
    auto& p = plan.phases[phase];
    const auto n = parse_i64(f[4], "plan");
    p.allocation[std::string(f[3])] = n;
    p.budget += n;
  }
  return plan;
}

}  // namespace cptlab
