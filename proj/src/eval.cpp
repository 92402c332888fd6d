// SPDX-License-Identifier: Apache-2.0
#include "cptlab/eval.hpp"

#include <fmt/format.h>

#include <cmath>
#include <json.hpp>

#include "cptlab/error.hpp"
#include "cptlab/text.hpp"

namespace cptlab {

double mean_nll(const ParameterSet& params, const ModelSpec& spec, std::span<const TokenId> tokens) {
  if (tokens.size() < 2) throw DataError(fmt::format("perplexity needs at least 2 tokens, got {}", tokens.size()));
  const std::size_t window = spec.context_length;
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t start = 0; start + 1 < tokens.size(); start += window) {
    const std::size_t end = std::min(tokens.size(), start + window + 1);
    const auto input = tokens.subspan(start, end - start - 1);
    const auto targets = tokens.subspan(start + 1, end - start - 1);
    const Tensor logits = forward(params, spec, input);
    for (double ll : target_log_likelihoods(logits, targets)) total -= ll;
    count += targets.size();
  }
  return total / static_cast<double>(count);
}

double perplexity(const ParameterSet& params, const ModelSpec& spec, std::span<const TokenId> tokens) {
  return std::exp(mean_nll(params, spec, tokens));
}

double continuation_score(const ParameterSet& params, const ModelSpec& spec,
                          std::span<const TokenId> prompt, std::span<const TokenId> continuation) {
  if (prompt.empty()) throw DataError("choice scoring needs a non-empty prompt");
  if (continuation.empty()) throw DataError("choice scoring needs a non-empty continuation");
  if (continuation.size() > spec.context_length) {
    throw DataError(fmt::format("continuation of {} tokens exceeds the context length {}",
                                continuation.size(), spec.context_length));
  }
  std::vector<TokenId> seq(prompt.begin(), prompt.end());
  seq.insert(seq.end(), continuation.begin(), continuation.end());
  const std::size_t keep = std::min(seq.size(), spec.context_length + 1);
  const std::span<const TokenId> window(seq.data() + seq.size() - keep, keep);
  const Tensor logits = forward(params, spec, window.first(keep - 1));
  const auto ll = target_log_likelihoods(logits, window.subspan(1));
  double sum = 0.0;
  for (std::size_t i = ll.size() - continuation.size(); i < ll.size(); ++i) sum += ll[i];
  return sum / static_cast<double>(continuation.size());
}

std::size_t pick_choice(std::span<const double> scores) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < scores.size(); ++i)
    if (scores[i] > scores[best]) best = i;
  return best;
}

namespace {

void check_item(const ChoiceItem& item, std::size_t index) {
  if (item.choices.size() < 2) {
    throw DataError(fmt::format("item {} has {} choices, need at least 2", index, item.choices.size()));
  }
  if (item.gold >= item.choices.size()) {
    throw DataError(fmt::format("item {}: gold index {} out of range for {} choices", index, item.gold,
                                item.choices.size()));
  }
}

std::string token_hash(std::span<const TokenId> tokens) {
  std::string bytes;
  bytes.reserve(tokens.size() * 4);
  for (TokenId t : tokens)
    for (int b = 0; b < 4; ++b) bytes.push_back(static_cast<char>((t >> (8 * b)) & 0xff));
  return hex64(fnv1a64(bytes));
}

}  // namespace

std::size_t predict_choice(const ParameterSet& params, const ModelSpec& spec, const Vocabulary& vocab,
                           const ChoiceItem& item) {
  const auto prompt = vocab.encode(item.prompt);
  std::vector<double> scores;
  for (const auto& choice : item.choices) {
    scores.push_back(continuation_score(params, spec, prompt, vocab.encode(choice)));
  }
  return pick_choice(scores);
}

double choice_accuracy(const ParameterSet& params, const ModelSpec& spec, const Vocabulary& vocab,
                       const std::vector<ChoiceItem>& items) {
  if (items.empty()) throw DataError("choice accuracy needs at least one item");
  for (std::size_t i = 0; i < items.size(); ++i) check_item(items[i], i);
  std::size_t correct = 0;
  for (const auto& item : items) correct += predict_choice(params, spec, vocab, item) == item.gold;
  return static_cast<double>(correct) / static_cast<double>(items.size());
}

std::vector<ChoiceItem> read_choice_items(const std::filesystem::path& path) {
  std::vector<ChoiceItem> items;
  std::size_t line_no = 0;
  for (const auto& line : read_lines(path)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      items.push_back(ChoiceItem{j.at("prompt").get<std::string>(),
                                 j.at("choices").get<std::vector<std::string>>(),
                                 j.at("gold").get<std::size_t>(), j.value("language", std::string())});
    } catch (const nlohmann::json::exception& e) {
      throw DataError(fmt::format("{}:{}: bad eval item: {}", path.string(), line_no, e.what()));
    }
  }
  return items;
}

EvalReport evaluate(const ParameterSet& params, const ModelSpec& spec, const Vocabulary& vocab,
                    const std::map<std::string, EvalSet>& sets, std::string checkpoint_id) {
  EvalReport report;
  report.checkpoint_id = std::move(checkpoint_id);
  for (const auto& [language, set] : sets) {
    LanguageResult r;
    r.perplexity = perplexity(params, spec, set.tokens);
    r.corpus_hash = token_hash(set.tokens);
    r.item_count = set.items.size();
    if (!set.items.empty()) r.accuracy = choice_accuracy(params, spec, vocab, set.items);
    report.languages.emplace(language, std::move(r));
  }
  return report;
}

std::string format_report(const EvalReport& report) {
  std::string out = fmt::format("checkpoint {}\n{:<10} {:>14} {:>10} {:>6}\n", report.checkpoint_id,
                                "language", "perplexity", "accuracy", "items");
  for (const auto& [language, r] : report.languages) {
    out += fmt::format("{:<10} {:>14.6f} {:>10} {:>6}\n", language, r.perplexity,
                       r.accuracy ? fmt::format("{:.4f}", *r.accuracy) : "-", r.item_count);
  }
  return out;
}

std::string report_table(const std::vector<std::pair<std::string, EvalReport>>& reports) {
  std::string out = "label\tlanguage\tperplexity\taccuracy\titems\tcorpus_hash\n";
  for (const auto& [label, report] : reports) {
    for (const auto& [language, r] : report.languages) {
      out += fmt::format("{}\t{}\t{:.17g}\t{}\t{}\t{}\n", label, language, r.perplexity,
                         r.accuracy ? fmt::format("{:.17g}", *r.accuracy) : "", r.item_count,
                         r.corpus_hash);
    }
  }
  return out;
}

namespace {

void check_arms(const RatioArm& a, const RatioArm& b) {
  std::vector<std::string> diffs;
  if (!(a.spec == b.spec)) diffs.push_back("model spec");
  if (a.seed != b.seed) diffs.push_back("seed");
  if (a.mix.total_tokens != b.mix.total_tokens) diffs.push_back("token budget");
  if (!(a.schedule == b.schedule)) diffs.push_back("schedule");
  if (!(a.adam == b.adam)) diffs.push_back("optimizer");
  if (a.stream.batch_tokens != b.stream.batch_tokens ||
      a.stream.sequence_length != b.stream.sequence_length ||
      a.stream.shuffle_documents != b.stream.shuffle_documents) {
    diffs.push_back("stream options");
  }
  if (!diffs.empty()) {
    std::string joined;
    for (const auto& d : diffs) joined += (joined.empty() ? "" : ", ") + d;
    throw ConfigError(fmt::format("ratio arms '{}' and '{}' differ beyond the mix: {}", a.name, b.name,
                                  joined));
  }
}

std::pair<EvalReport, RunMetrics> run_arm(const RatioArm& arm, const std::vector<Shard>& shards,
                                          const Vocabulary& vocab,
                                          const std::map<std::string, EvalSet>& sets) {
  Rng rng(derive_seed(arm.seed, "init"));
  Checkpoint start;
  start.spec = arm.spec;
  start.tokenizer_fingerprint = vocab.fingerprint();
  start.params = init_parameters(arm.spec, rng);
  MixPlan plan;
  plan.phases.push_back(PhasePlan{0.0, 1.0, arm.mix.total_tokens, plan_mix(arm.mix)});
  StreamOptions options = arm.stream;
  options.seed = derive_seed(arm.seed, "stream");
  BatchStream stream(std::move(plan), shards, options);
  TrainConfig config;
  config.schedule = arm.schedule;
  config.adam = arm.adam;
  auto run = pretrain(std::move(start), stream, config);
  auto report = evaluate(run.final.params, run.final.spec, vocab, sets, arm.name);
  return {std::move(report), std::move(run.metrics)};
}

}  // namespace

RatioResult ratio_experiment(const RatioArm& a, const RatioArm& b, const std::vector<Shard>& shards,
                             const Vocabulary& vocab, const std::map<std::string, EvalSet>& sets) {
  check_arms(a, b);
  a.mix.validate();
  b.mix.validate();
  auto [report_a, metrics_a] = run_arm(a, shards, vocab, sets);
  auto [report_b, metrics_b] = run_arm(b, shards, vocab, sets);
  return RatioResult{std::move(report_a), std::move(report_b), std::move(metrics_a), std::move(metrics_b)};
}

std::string format_comparison(const std::string& label_a, const EvalReport& a,
                              const std::string& label_b, const EvalReport& b) {
  std::string out = fmt::format("{:<10} {:>14} {:>14} {:>10} {:>10}\n", "language", "ppl " + label_a,
                                "ppl " + label_b, "acc " + label_a, "acc " + label_b);
  auto acc = [](const std::optional<double>& v) { return v ? fmt::format("{:.4f}", *v) : std::string("-"); };
  for (const auto& [language, ra] : a.languages) {
    auto it = b.languages.find(language);
    if (it == b.languages.end()) continue;
    out += fmt::format("{:<10} {:>14.6f} {:>14.6f} {:>10} {:>10}\n", language, ra.perplexity,
                       it->second.perplexity, acc(ra.accuracy), acc(it->second.accuracy));
  }
  return out;
}

}  // namespace cptlab
