// SPDX-License-Identifier: Apache-2.0
#include "commands.hpp"

#include <fmt/format.h>

#include <CLI11.hpp>
#include <fstream>
#include <functional>
#include <iostream>
#include <json.hpp>
#include <sstream>

#include "cptlab/checkpoint.hpp"
#include "cptlab/config.hpp"
#include "cptlab/error.hpp"
#include "cptlab/eval.hpp"
#include "cptlab/expansion.hpp"
#include "cptlab/langid.hpp"
#include "cptlab/mixer.hpp"
#include "cptlab/text.hpp"
#include "cptlab/tokenizer.hpp"
#include "cptlab/trainer.hpp"

namespace cptlab::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Sub-seeds, one per stage that draws randomness.
constexpr std::string_view kInitStage = "init";
constexpr std::string_view kExpandStage = "expand";
constexpr std::string_view kStreamStage = "stream";
constexpr std::string_view kSftStage = "sft";

struct Invocation {
  std::string command;
  fs::path config_path;
  std::optional<std::uint64_t> seed;
  std::optional<fs::path> out;
  bool verbose = false;
  std::vector<std::string> positional;
};

class Context {
 public:
  Context(ExperimentConfig config, const Invocation& inv, std::ostream& out)
      : config_(std::move(config)), inv_(inv), out_(out) {
    if (inv.out) {
      dir_ = fs::absolute(*inv.out).lexically_normal();
      config_.output_dir = dir_;
    } else if (config_.output_dir) {
      dir_ = *config_.output_dir;
    } else {
      throw ConfigError("no output directory: set output_dir or pass --out");
    }
    fs::create_directories(dir_);
  }

  const ExperimentConfig& config() const { return config_; }
  const Invocation& invocation() const { return inv_; }
  std::ostream& out() { return out_; }
  const fs::path& dir() const { return dir_; }

  void log(const std::string& line) {
    if (inv_.verbose) out_ << line << '\n';
  }

  const fs::path& input(const fs::path& path) {
    inputs_.push_back(fs::weakly_canonical(path));
    return path;
  }

  fs::path artifact(const std::string& name) {
    const fs::path path = dir_ / name;
    const auto canonical = fs::weakly_canonical(path);
    for (const auto& in : inputs_) {
      if (in == canonical) throw ConfigError(fmt::format("output {} would overwrite an input", path.string()));
    }
    fs::create_directories(path.parent_path());
    artifacts_.push_back(path);
    return path;
  }

  void write(const std::string& name, std::string_view contents) { write_file_atomic(artifact(name), contents); }

  void produced(const fs::path& path) {
    if (std::find(artifacts_.begin(), artifacts_.end(), path) == artifacts_.end()) artifacts_.push_back(path);
  }

  /// Timing fields make these differ between replays.
  void mark_volatile(const fs::path& path) { volatile_.insert(path); }

  Vocabulary vocabulary() {
    if (!config_.tokenizer.vocab) return Vocabulary();
    return load_vocabulary(input(require_file(config_.tokenizer.vocab, "tokenizer.vocab")));
  }

  Checkpoint checkpoint(const std::optional<fs::path>& path, std::string_view what) {
    return load_checkpoint(input(require_file(path, what)));
  }

  void finish() {
    json record;
    record["command"] = inv_.command;
    record["seed"] = config_.seed;
    record["config_hash"] = config_hash(config_);
    record["versions"] = {{"cptlab", kToolVersion},
                          {"config_schema", kConfigVersion},
                          {"compiler", __VERSION__},
                          {"fmt", FMT_VERSION},
                          {"json", fmt::format("{}.{}.{}", NLOHMANN_JSON_VERSION_MAJOR,
                                               NLOHMANN_JSON_VERSION_MINOR, NLOHMANN_JSON_VERSION_PATCH)}};
    json artifacts = json::object();
    for (const auto& path : artifacts_) {
      const auto rel = fs::relative(path, dir_).generic_string();
      artifacts[rel] = volatile_.contains(path) ? std::string("volatile") : hex64(fnv1a64(read_file(path)));
    }
    record["artifacts"] = artifacts;
    record["inputs"] = json::array();
    for (const auto& in : inputs_) record["inputs"].push_back(in.generic_string());
    write_file_atomic(dir_ / "config.json", serialize_config(config_));
    write_file_atomic(dir_ / "run.json", record.dump(2) + "\n");
    log(fmt::format("run record {}", (dir_ / "run.json").string()));
  }

 private:
  ExperimentConfig config_;
  const Invocation& inv_;
  std::ostream& out_;
  fs::path dir_;
  std::vector<fs::path> inputs_;
  std::vector<fs::path> artifacts_;
  std::set<fs::path> volatile_;
};

std::string concatenate(Context& ctx, const std::vector<fs::path>& paths) {
  std::string all;
  for (const auto& p : paths) all += read_file(ctx.input(p));
  return all;
}

void check_fingerprint(const Checkpoint& ckpt, const Vocabulary& vocab, const fs::path& where) {
  if (!ckpt.tokenizer_fingerprint.empty() && ckpt.tokenizer_fingerprint != vocab.fingerprint()) {
    throw ConfigError(fmt::format("checkpoint {} was built for tokenizer {} but the configured tokenizer is {}",
                                  where.string(), ckpt.tokenizer_fingerprint, vocab.fingerprint()));
  }
}

std::vector<Shard> load_shards(Context& ctx, const Vocabulary& vocab) {
  const auto& sources = ctx.config().data.shards;
  if (sources.empty()) throw ConfigError("data.shards is required for this command");
  std::vector<Shard> shards;
  for (const auto& src : sources) {
    require_file(src.path, "data shard");
    Shard shard{src.language, {}, src.upsample};
    for (const auto& line : read_lines(ctx.input(src.path))) {
      if (line.empty()) continue;
      shard.documents.push_back(vocab.encode(line + "\n"));
    }
    shards.push_back(std::move(shard));
  }
  return shards;
}

MixPlan build_plan(Context& ctx, const std::vector<Shard>* shards) {
  const auto& c = ctx.config();
  if (c.mix) return MixPlan{{PhasePlan{0.0, 1.0, c.mix->total_tokens, plan_mix(*c.mix)}}};
  if (!c.curriculum) throw ConfigError("mix or curriculum is required for this command");
  const auto& cu = *c.curriculum;
  if (!cu.phases.empty()) return build_curriculum(cu.phases, cu.total_tokens, cu.granularity);
  Allocation sizes = cu.sizes;
  if (sizes.empty()) {
    if (!shards) throw ConfigError("curriculum.sizes is required for this command");
    for (const auto& s : *shards) sizes[s.language] += s.token_count();
  }
  MixPlan plan = staged_curriculum(sizes, *cu.late_language, cu.late_start, cu.granularity);
  if (plan.total() != cu.total_tokens) {
    throw ConfigError(fmt::format("curriculum.total_tokens is {} but the corpus sizes add up to {}",
                                  cu.total_tokens, plan.total()));
  }
  return plan;
}

bool plan_needs_shards(const ExperimentConfig& c) {
  return c.curriculum && c.curriculum->phases.empty() && c.curriculum->sizes.empty();
}

StreamOptions stream_options(const ExperimentConfig& c) {
  return StreamOptions{c.data.batch_tokens, c.data.sequence_length, derive_seed(c.seed, kStreamStage),
                       c.data.shuffle_documents};
}

std::string fmt_tokens(std::int64_t n) {
  std::string digits = std::to_string(n);
  std::string out;
  for (std::size_t i = 0; i < digits.size(); ++i) {
    if (i > 0 && (digits.size() - i) % 3 == 0) out += ',';
    out += digits[i];
  }
  return out;
}

// --- tok ---------------------------------------------------------------

void tok_train(Context& ctx) {
  const auto& t = ctx.config().tokenizer;
  require_files(t.train_corpora, "tokenizer.train_corpora");
  const auto vocab = bpe_train(concatenate(ctx, t.train_corpora), t.merges);
  ctx.write("vocab.txt", serialize_vocabulary(vocab));
  ctx.out() << fmt::format("trained {} merges, vocabulary {} tokens, fingerprint {}\n", vocab.merges().size(),
                           vocab.size(), vocab.fingerprint());
}

void tok_extend(Context& ctx) {
  const auto& t = ctx.config().tokenizer;
  const auto base = load_vocabulary(ctx.input(require_file(t.base, "tokenizer.base")));
  require_files(t.extend_corpora, "tokenizer.extend_corpora");
  const auto ext = extend_vocab(base, concatenate(ctx, t.extend_corpora), t.extension_fraction, t.reserved_tokens);
  ctx.write("vocab.txt", serialize_vocabulary(ext.vocab));
  json stats = {{"requested", ext.stats.requested},
                {"trained", ext.stats.trained},
                {"added", ext.stats.added},
                {"duplicates", ext.stats.duplicates},
                {"base_size", base.size()},
                {"size", ext.vocab.size()}};
  ctx.write("extension.json", stats.dump(2) + "\n");
  ctx.out() << fmt::format("extension {:.0f}%: {} merges requested, {} trained, {} new tokens, {} duplicates\n",
                           t.extension_fraction * 100.0, ext.stats.requested, ext.stats.trained, ext.stats.added,
                           ext.stats.duplicates);
}

void tok_fertility(Context& ctx) {
  const auto& t = ctx.config().tokenizer;
  if (t.fertility_corpora.empty()) throw ConfigError("tokenizer.fertility_corpora is required for this command");
  std::vector<std::pair<std::string, Vocabulary>> vocabs;
  if (t.base) vocabs.emplace_back("base", load_vocabulary(ctx.input(require_file(t.base, "tokenizer.base"))));
  vocabs.emplace_back("vocab", ctx.vocabulary());
  std::string table = "vocabulary\tsize\tcorpus\ttokens\twords\tfertility\n";
  for (const auto& [label, vocab] : vocabs) {
    for (const auto& [id, path] : t.fertility_corpora) {
      require_file(path, "tokenizer.fertility_corpora");
      const auto r = fertility(vocab, read_file(ctx.input(path)), id);
      table += fmt::format("{}\t{}\t{}\t{}\t{}\t{:.6f}\n", label, vocab.size(), id, r.token_count, r.word_count,
                           r.fertility);
      ctx.out() << fmt::format("{:<6} {:>6} tokens  {:<10} fertility {:.4f}\n", label, vocab.size(), id,
                               r.fertility);
    }
  }
  ctx.write("fertility.tsv", table);
}

void tok_encode(Context& ctx) {
  const auto vocab = ctx.vocabulary();
  std::string text;
  const auto& pos = ctx.invocation().positional;
  if (pos.empty()) {
    std::ostringstream ss;
    ss << std::cin.rdbuf();
    text = ss.str();
  } else {
    const fs::path path(pos.front());
    if (!fs::is_regular_file(path)) throw ConfigError(fmt::format("input {} does not exist", path.string()));
    text = read_file(ctx.input(path));
  }
  std::string encoded;
  std::size_t start = 0;
  while (start < text.size()) {
    const auto end = text.find('\n', start);
    const auto line = std::string_view(text).substr(start, end == std::string::npos ? std::string::npos : end - start);
    const auto ids = vocab.encode(line);
    for (std::size_t i = 0; i < ids.size(); ++i) encoded += (i ? " " : "") + std::to_string(ids[i]);
    encoded += '\n';
    if (end == std::string::npos) break;
    start = end + 1;
  }
  ctx.write("encoded.txt", encoded);
  ctx.out() << encoded;
}

// --- langid ------------------------------------------------------------

void langid_train(Context& ctx) {
  const auto& l = ctx.config().langid;
  const auto labeled = read_labeled(ctx.input(require_file(l.training, "langid.training")));
  const auto profiles = train_classifier(labeled, l.range);
  ctx.write("profiles.txt", serialize_profiles(profiles));
  for (const auto& p : profiles) {
    ctx.out() << fmt::format("{:<6} {} sentences, {} n-grams, prior {:.4f}\n", p.tag, p.sentences, p.log_prob.size(),
                             p.prior);
  }
}

void langid_filter(Context& ctx) {
  const auto& l = ctx.config().langid;
  const auto profiles = load_profiles(ctx.input(require_file(l.profiles, "langid.profiles")));
  if (l.target.empty()) throw ConfigError("langid.target is required for this command");
  std::ifstream in(ctx.input(require_file(l.input, "langid.input")), std::ios::binary);
  std::ostringstream kept, rejected;
  const auto counts = filter_corpus(profiles, in, kept, rejected, l.target, l.margin);
  ctx.write("kept.txt", kept.str());
  ctx.write("rejected.txt", rejected.str());
  json summary = {{"lines", counts.lines},
                  {"kept", counts.kept},
                  {"rejected", counts.rejected},
                  {"rejected_by_tag", counts.rejected_by_tag}};
  ctx.write("filter.json", summary.dump(2) + "\n");
  ctx.out() << fmt::format("{} lines: kept {}, rejected {}\n", counts.lines, counts.kept, counts.rejected);
}

// --- mix ---------------------------------------------------------------

void print_plan(Context& ctx, const MixPlan& plan) {
  const auto batch = ctx.config().data.batch_tokens;
  for (std::size_t p = 0; p < plan.phases.size(); ++p) {
    const auto& ph = plan.phases[p];
    ctx.out() << fmt::format("phase {} [{:g}, {:g}) budget {}\n", p, ph.start_fraction, ph.end_fraction,
                             fmt_tokens(ph.budget));
    for (const auto& [lang, n] : ph.allocation) ctx.out() << fmt::format("  {:<6} {:>20}\n", lang, fmt_tokens(n));
  }
  ctx.out() << fmt::format("total {}\n", fmt_tokens(plan.total()));
  for (const auto& [lang, n] : plan.language_totals()) {
    const auto first = first_batch_with(plan, lang, batch);
    ctx.out() << fmt::format("  {:<6} {:>20}  first batch {}\n", lang, fmt_tokens(n),
                             first ? std::to_string(*first) : std::string("-"));
  }
}

void mix_plan(Context& ctx) {
  std::optional<std::vector<Shard>> shards;
  if (plan_needs_shards(ctx.config())) shards = load_shards(ctx, ctx.vocabulary());
  const MixPlan plan = build_plan(ctx, shards ? &*shards : nullptr);
  ctx.write("plan.tsv", serialize_plan(plan));
  print_plan(ctx, plan);
}

void mix_stream_audit(Context& ctx) {
  const auto& c = ctx.config();
  const auto vocab = ctx.vocabulary();
  const auto shards = load_shards(ctx, vocab);
  const MixPlan plan = build_plan(ctx, &shards);

  std::vector<ShardRecord> records;
  for (std::size_t i = 0; i < shards.size(); ++i) {
    const auto& src = c.data.shards[i];
    records.push_back(ShardRecord{src.path, src.language, shards[i].token_count(), hex64(fnv1a64(read_file(src.path)))});
  }
  ctx.write("manifest.tsv", serialize_manifest(records));

  BatchStream stream(plan, shards, stream_options(c));
  std::string audit = "batch\tphase\tlanguage\ttokens\n";
  Allocation consumed;
  std::map<std::string, std::uint64_t> first_seen;
  std::uint64_t batches = 0;
  while (auto batch = stream.next()) {
    ++batches;
    for (const auto& [lang, n] : batch->composition) {
      if (n == 0) continue;
      audit += fmt::format("{}\t{}\t{}\t{}\n", batch->index, batch->phase, lang, n);
      consumed[lang] += n;
      first_seen.emplace(lang, batch->index);
    }
  }
  ctx.write("audit.tsv", audit);
  const auto planned = plan.language_totals();
  for (const auto& [lang, n] : planned) {
    const auto got = consumed.contains(lang) ? consumed.at(lang) : 0;
    if (got != n) {
      throw StateError(fmt::format("stream delivered {} tokens of '{}' but the plan allots {}", got, lang, n));
    }
    const auto predicted = first_batch_with(plan, lang, c.data.batch_tokens);
    const auto observed = first_seen.contains(lang) ? std::optional(first_seen.at(lang)) : std::nullopt;
    if (predicted != observed) {
      throw StateError(fmt::format("first batch with '{}' is {} but the plan predicts {}", lang,
                                   observed ? std::to_string(*observed) : "none",
                                   predicted ? std::to_string(*predicted) : "none"));
    }
    ctx.out() << fmt::format("{:<6} {:>14} tokens  first batch {}\n", lang, fmt_tokens(got),
                             observed ? std::to_string(*observed) : std::string("-"));
  }
  ctx.out() << fmt::format("{} batches, {} tokens, allocations conserved\n", batches, fmt_tokens(plan.total()));
}

// --- model -------------------------------------------------------------

void model_init(Context& ctx) {
  const auto& c = ctx.config();
  const auto vocab = ctx.vocabulary();
  const ModelSpec spec = c.model.resolve(vocab.size());
  Rng rng(derive_seed(c.seed, kInitStage));
  Checkpoint ckpt{spec, vocab.fingerprint(), 0, 0, init_parameters(spec, rng), std::nullopt};
  save_checkpoint(ckpt, ctx.artifact("init.ckpt"));
  ctx.out() << fmt::format("initialized {} layers, d_model {}, vocabulary {}: {} parameters\n", spec.n_layers,
                           spec.d_model, spec.vocab_size, parameter_count(spec));
}

void model_expand(Context& ctx) {
  const auto& c = ctx.config();
  const auto& e = c.expansion;
  Checkpoint base = ctx.checkpoint(e.checkpoint, "expansion.checkpoint");

  ExpansionPlan plan;
  plan.n_new_blocks = e.new_blocks;
  plan.placement = e.placement ? *e.placement : interleaved_placement(base.spec.n_layers, e.new_blocks);
  std::string fingerprint = base.tokenizer_fingerprint;
  if (e.extend_embeddings) {
    const auto old_vocab = load_vocabulary(ctx.input(require_file(c.tokenizer.base, "tokenizer.base")));
    const auto new_vocab = ctx.vocabulary();
    check_fingerprint(base, old_vocab, *e.checkpoint);
    plan.new_token_seeds = new_token_constituents(old_vocab, new_vocab);
    fingerprint = new_vocab.fingerprint();
  }

  Rng rng(derive_seed(c.seed, kExpandStage));
  auto grown = expand(base.params, base.spec, plan, rng);
  if (e.extend_embeddings) grown = extend_embeddings(grown.params, grown.spec, plan);
  if (e.freeze) grown.params = freeze_backbone(grown.params, grown.spec, plan);

  Checkpoint out{grown.spec, fingerprint, 0, 0, std::move(grown.params), std::nullopt};
  save_checkpoint(out, ctx.artifact("expanded.ckpt"));
  std::string where;
  for (auto i : inserted_layer_indices(plan)) where += (where.empty() ? "" : ",") + std::to_string(i);
  ctx.out() << fmt::format("expanded {} -> {} layers (new blocks at {}), vocabulary {} -> {}, trainable {} of {}\n",
                           base.spec.n_layers, out.spec.n_layers, where.empty() ? "-" : where, base.spec.vocab_size,
                           out.spec.vocab_size, out.params.trainable_count(), out.params.total_count());
}

// --- train -------------------------------------------------------------

const char* reason_name(StopReason r) {
  switch (r) {
    case StopReason::schedule_complete: return "schedule complete";
    case StopReason::stream_exhausted: return "stream exhausted";
    case StopReason::stop_requested: return "max_steps reached";
  }
  return "";
}

void run_pretrain(Context& ctx, Checkpoint start, bool append_metrics) {
  const auto& c = ctx.config();
  const auto vocab = ctx.vocabulary();
  const auto shards = load_shards(ctx, vocab);
  const MixPlan plan = build_plan(ctx, &shards);
  BatchStream stream(plan, shards, stream_options(c));

  TrainConfig tc;
  tc.schedule = c.schedule;
  tc.adam = c.optimizer;
  tc.checkpoint_every = c.training.checkpoint_every;
  tc.checkpoint_at_phase_boundary = c.training.phase_checkpoints;
  tc.checkpoint_dir = ctx.dir() / "checkpoints";
  tc.metrics_path = ctx.artifact("metrics.jsonl");
  tc.stop_at_step = c.training.max_steps;
  ctx.mark_volatile(tc.metrics_path);
  if (!append_metrics) write_file_atomic(tc.metrics_path, "");
  ctx.log(fmt::format("{} batches planned, starting at step {}", stream.total_steps(), start.step));

  const auto result = pretrain(std::move(start), stream, tc);
  for (const auto& s : result.saved) ctx.produced(s.path);
  const auto& m = result.metrics;
  const double last = m.steps().empty() ? std::nan("") : m.steps().back().loss;
  ctx.out() << fmt::format("step {} ({}), last loss {:.6f}, {} tokens, {:.1f} tokens/s\n", result.final.step,
                           reason_name(result.reason), last, fmt_tokens(m.total_tokens()), m.tokens_per_second());
  for (const auto& s : result.saved) ctx.log(fmt::format("saved {} ({})", s.path.string(), s.reason));
}

void train_pretrain(Context& ctx) {
  const auto& c = ctx.config();
  const auto vocab = ctx.vocabulary();
  Checkpoint start;
  if (c.training.init) {
    start = ctx.checkpoint(c.training.init, "training.init");
    check_fingerprint(start, vocab, *c.training.init);
  } else {
    const ModelSpec spec = c.model.resolve(vocab.size());
    Rng rng(derive_seed(c.seed, kInitStage));
    start = Checkpoint{spec, vocab.fingerprint(), 0, 0, init_parameters(spec, rng), std::nullopt};
  }
  run_pretrain(ctx, std::move(start), false);
}

void train_resume(Context& ctx) {
  const auto& pos = ctx.invocation().positional;
  if (pos.size() != 1) throw ConfigError("train resume takes exactly one checkpoint path");
  Checkpoint start = ctx.checkpoint(fs::path(pos.front()), "checkpoint");
  check_fingerprint(start, ctx.vocabulary(), pos.front());
  run_pretrain(ctx, std::move(start), true);
}

std::vector<FormattedExample> format_all(const std::vector<InstructionPair>& pairs, const Vocabulary& vocab) {
  std::vector<FormattedExample> out;
  for (const auto& p : pairs) out.push_back(format_instruction(p, vocab));
  return out;
}

void train_sft(Context& ctx) {
  const auto& c = ctx.config();
  const auto vocab = ctx.vocabulary();
  Checkpoint start = ctx.checkpoint(c.sft.init, "sft.init");
  check_fingerprint(start, vocab, *c.sft.init);
  const auto train = format_all(read_instruction_pairs(ctx.input(require_file(c.sft.pairs, "sft.pairs"))), vocab);
  const auto valid =
      format_all(read_instruction_pairs(ctx.input(require_file(c.sft.validation, "sft.validation"))), vocab);

  SftConfig sc;
  sc.epochs = c.sft.epochs;
  sc.pairs_per_step = c.sft.pairs_per_step;
  sc.schedule = c.schedule;
  sc.adam = c.optimizer;
  sc.seed = derive_seed(c.seed, kSftStage);
  sc.checkpoint_dir = ctx.dir() / "sft";
  const auto result = sft(std::move(start), train, sc, [&](const ParameterSet& p, const ModelSpec& s, std::size_t) {
    return response_token_accuracy(p, s, valid);
  });

  std::string table = "epoch\tscore\tselected\tcheckpoint\n";
  for (std::size_t i = 0; i < result.epochs.size(); ++i) {
    const auto& e = result.epochs[i];
    ctx.produced(e.path);
    const bool chosen = i == result.selected;
    table += fmt::format("{}\t{:.17g}\t{}\t{}\n", e.epoch, e.score, chosen ? 1 : 0,
                         fs::relative(e.path, ctx.dir()).generic_string());
    ctx.out() << fmt::format("epoch {}: validation response accuracy {:.4f}{}\n", e.epoch, e.score,
                             chosen ? "  <- selected" : "");
  }
  ctx.write("sft.tsv", table);
}

// --- eval --------------------------------------------------------------

std::vector<std::pair<std::string, Checkpoint>> eval_checkpoints(Context& ctx, const Vocabulary& vocab) {
  const auto& paths = ctx.config().eval.checkpoints;
  require_files(paths, "eval.checkpoints");
  std::vector<std::pair<std::string, Checkpoint>> out;
  for (const auto& p : paths) {
    auto ckpt = load_checkpoint(ctx.input(p));
    check_fingerprint(ckpt, vocab, p);
    out.emplace_back(p.generic_string(), std::move(ckpt));
  }
  return out;
}

std::map<std::string, EvalSet> eval_corpora(Context& ctx, const Vocabulary& vocab) {
  const auto& corpora = ctx.config().eval.corpora;
  if (corpora.empty()) throw ConfigError("eval.corpora is required for this command");
  std::map<std::string, EvalSet> sets;
  for (const auto& [lang, path] : corpora) {
    require_file(path, "eval.corpora");
    sets[lang].tokens = vocab.encode(read_file(ctx.input(path)));
  }
  return sets;
}

void eval_ppl(Context& ctx) {
  const auto vocab = ctx.vocabulary();
  const auto ckpts = eval_checkpoints(ctx, vocab);
  const auto sets = eval_corpora(ctx, vocab);
  std::vector<std::pair<std::string, EvalReport>> reports;
  for (const auto& [label, ckpt] : ckpts) {
    reports.emplace_back(label, evaluate(ckpt.params, ckpt.spec, vocab, sets, label));
    ctx.out() << format_report(reports.back().second);
  }
  if (reports.size() == 2) {
    ctx.out() << format_comparison("A", reports[0].second, "B", reports[1].second);
  }
  ctx.write("eval.tsv", report_table(reports));
}

void eval_choices(Context& ctx) {
  const auto vocab = ctx.vocabulary();
  const auto ckpts = eval_checkpoints(ctx, vocab);
  const auto items = read_choice_items(ctx.input(require_file(ctx.config().eval.items, "eval.items")));
  std::map<std::string, std::vector<ChoiceItem>> by_language;
  for (const auto& item : items) by_language[item.language.empty() ? "all" : item.language].push_back(item);
  std::string table = "label\tlanguage\taccuracy\titems\n";
  for (const auto& [label, ckpt] : ckpts) {
    ctx.out() << "checkpoint " << label << '\n';
    for (const auto& [lang, group] : by_language) {
      const double acc = choice_accuracy(ckpt.params, ckpt.spec, vocab, group);
      table += fmt::format("{}\t{}\t{:.17g}\t{}\n", label, lang, acc, group.size());
      ctx.out() << fmt::format("  {:<6} accuracy {:.4f} over {} items\n", lang, acc, group.size());
    }
  }
  ctx.write("choices.tsv", table);
}

void eval_ratio_ab(Context& ctx) {
  const auto& c = ctx.config();
  if (c.ratio.arms.size() != 2) throw ConfigError("ratio with two arms is required for this command");
  const auto vocab = ctx.vocabulary();
  const auto shards = load_shards(ctx, vocab);
  const auto sets = eval_corpora(ctx, vocab);
  const ModelSpec spec = c.model.resolve(vocab.size());
  std::vector<RatioArm> arms;
  for (const auto& a : c.ratio.arms) {
    arms.push_back(RatioArm{a.name, spec, c.seed, MixSpec{c.ratio.total_tokens, a.ratios}, c.schedule, c.optimizer,
                            StreamOptions{c.data.batch_tokens, c.data.sequence_length, 0, c.data.shuffle_documents}});
  }
  const auto result = ratio_experiment(arms[0], arms[1], shards, vocab, sets);
  ctx.write("ratio.tsv", report_table({{arms[0].name, result.a}, {arms[1].name, result.b}}));
  ctx.out() << format_comparison(arms[0].name, result.a, arms[1].name, result.b);
  ctx.out() << fmt::format("{}: {} tokens, {:.1f} tokens/s; {}: {} tokens, {:.1f} tokens/s\n", arms[0].name,
                           fmt_tokens(result.metrics_a.total_tokens()), result.metrics_a.tokens_per_second(),
                           arms[1].name, fmt_tokens(result.metrics_b.total_tokens()),
                           result.metrics_b.tokens_per_second());
}

using Handler = std::function<void(Context&)>;

struct Command {
  const char* group;
  const char* name;
  const char* help;
  Handler handler;
  bool positional = false;
};

const std::vector<Command>& commands() {
  static const std::vector<Command> all = {
      {"tok", "train", "train a byte-level BPE vocabulary", tok_train},
      {"tok", "extend", "continue merges on new-language text", tok_extend},
      {"tok", "fertility", "tokens per word on each corpus", tok_fertility},
      {"tok", "encode", "print token ids for a file (or stdin)", tok_encode, true},
      {"langid", "train", "train n-gram language profiles", langid_train},
      {"langid", "filter", "keep lines identified as the target language", langid_filter},
      {"mix", "plan", "per-language token allocations", mix_plan},
      {"mix", "stream-audit", "replay the batch stream and check it against the plan", mix_stream_audit},
      {"model", "init", "write a freshly initialized checkpoint", model_init},
      {"model", "expand", "insert identity blocks and freeze the backbone", model_expand},
      {"train", "pretrain", "pretrain or continue pretraining on the mixed stream", train_pretrain},
      {"train", "sft", "instruction tuning with per-epoch checkpoints", train_sft},
      {"train", "resume", "continue a run from a saved checkpoint", train_resume, true},
      {"eval", "ppl", "perplexity per language", eval_ppl},
      {"eval", "choices", "multiple-choice accuracy", eval_choices},
      {"eval", "ratio-ab", "train and compare two mixing ratios", eval_ratio_ab},
  };
  return all;
}

std::string one_line(std::string s) {
  for (auto& ch : s)
    if (ch == '\n' || ch == '\r') ch = ' ';
  return s;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"cptlab: continual pretraining toolkit"};
  app.name("cptlab");
  app.fallthrough();
  app.require_subcommand(1);
  app.set_version_flag("--version", kToolVersion);

  Invocation inv;
  std::string config_arg, out_arg;
  app.add_option("--config", config_arg, "experiment config (JSON)");
  app.add_option("--seed", inv.seed, "override the config seed");
  app.add_option("--out", out_arg, "output directory (overrides output_dir)");
  app.add_flag("--verbose", inv.verbose, "extra progress output");

  const std::map<std::string, std::string> group_help{
      {"tok", "tokenizer training, extension and fertility"},
      {"langid", "n-gram language identification"},
      {"mix", "token budgets and streamed batch audits"},
      {"model", "initialisation and depth expansion"},
      {"train", "pretraining, resumption and instruction tuning"},
      {"eval", "perplexity, multiple choice and ratio comparisons"},
  };
  const Command* selected = nullptr;
  std::map<std::string, CLI::App*> groups;
  for (const auto& cmd : commands()) {
    auto& group = groups[cmd.group];
    if (!group) {
      group = app.add_subcommand(cmd.group, group_help.at(cmd.group));
      group->require_subcommand(1);
    }
    auto* leaf = group->add_subcommand(cmd.name, cmd.help);
    if (cmd.positional) leaf->add_option("args", inv.positional, "input path");
    leaf->callback([&selected, &cmd] { selected = &cmd; });
  }

  std::vector<const char*> argv{"cptlab"};
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::Success& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e, out, err);
    err << "UsageError: " << one_line(e.what()) << '\n';
    return 2;
  }

  try {
    inv.command = fmt::format("{} {}", selected->group, selected->name);
    if (config_arg.empty()) throw ConfigError("--config is required");
    inv.config_path = config_arg;
    if (!out_arg.empty()) inv.out = out_arg;
    Context ctx(load_config(inv.config_path, inv.seed), inv, out);
    selected->handler(ctx);
    ctx.finish();
    return 0;
  } catch (const Error& e) {
    err << e.kind() << ": " << one_line(e.what()) << '\n';
    return 1;
  } catch (const fs::filesystem_error& e) {
    err << "IoError: " << one_line(e.what()) << '\n';
    return 1;
  } catch (const std::exception& e) {
    err << "InternalError: " << one_line(e.what()) << '\n';
    return 3;
  }
}

}  // namespace cptlab::cli
