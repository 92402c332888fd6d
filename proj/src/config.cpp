// SPDX-License-Identifier: Apache-2.0
#include "cptlab/config.hpp"

#include <fmt/format.h>

#include <cmath>
#include <json.hpp>
#include <set>
#include <type_traits>

#include "cptlab/error.hpp"
#include "cptlab/text.hpp"

namespace cptlab {

namespace fs = std::filesystem;
using nlohmann::json;

ModelSpec ModelConfig::resolve(std::size_t tokenizer_vocab) const {
  if (vocab_size && *vocab_size != tokenizer_vocab) {
    throw ConfigError(fmt::format("model.vocab_size is {} but the tokenizer has {} tokens", *vocab_size,
                                  tokenizer_vocab));
  }
  ModelSpec spec;
  spec.n_layers = n_layers;
  spec.d_model = d_model;
  spec.n_heads = n_heads;
  spec.d_ff = d_ff;
  spec.vocab_size = tokenizer_vocab;
  spec.context_length = context_length;
  spec.rope_base = rope_base;
  spec.validate();
  return spec;
}

namespace {

// Reads one JSON object, remembering which keys were consumed so that
// leftovers can be reported.
class Reader {
 public:
  Reader(const json& j, std::string where, const fs::path& base)
      : j_(j), where_(std::move(where)), base_(base) {
    if (!j_.is_object()) throw ConfigError(fmt::format("{} must be an object", name()));
  }

  bool has(const std::string& key) {
    seen_.insert(key);
    return j_.contains(key) && !j_.at(key).is_null();
  }

  template <typename T>
  T get(const std::string& key, T fallback) {
    if (!has(key)) return fallback;
    return convert<T>(j_.at(key), path_of(key));
  }

  template <typename T>
  T require(const std::string& key) {
    if (!has(key)) throw ConfigError(fmt::format("{} is required", path_of(key)));
    return convert<T>(j_.at(key), path_of(key));
  }

  template <typename T>
  std::optional<T> maybe(const std::string& key) {
    if (!has(key)) return std::nullopt;
    return convert<T>(j_.at(key), path_of(key));
  }

  std::optional<fs::path> file(const std::string& key) {
    if (!has(key)) return std::nullopt;
    return resolve(convert<std::string>(j_.at(key), path_of(key)));
  }

  std::vector<fs::path> files(const std::string& key) {
    std::vector<fs::path> out;
    if (!has(key)) return out;
    for (const auto& s : convert<std::vector<std::string>>(j_.at(key), path_of(key))) out.push_back(resolve(s));
    return out;
  }

  std::map<std::string, fs::path> file_map(const std::string& key) {
    std::map<std::string, fs::path> out;
    if (!has(key)) return out;
    for (const auto& [k, v] : convert<std::map<std::string, std::string>>(j_.at(key), path_of(key)))
      out.emplace(k, resolve(v));
    return out;
  }

  std::optional<Reader> section(const std::string& key) {
    if (!has(key)) return std::nullopt;
    return Reader(j_.at(key), path_of(key), base_);
  }

  std::vector<Reader> list(const std::string& key) {
    std::vector<Reader> out;
    if (!has(key)) return out;
    const auto& arr = j_.at(key);
    if (!arr.is_array()) throw ConfigError(fmt::format("{} must be a list", path_of(key)));
    for (std::size_t i = 0; i < arr.size(); ++i)
      out.emplace_back(arr[i], fmt::format("{}[{}]", path_of(key), i), base_);
    return out;
  }

  void finish() const {
    for (const auto& [key, value] : j_.items()) {
      if (!seen_.contains(key)) throw ConfigError(fmt::format("unknown key {}", path_of(key)));
    }
  }

  std::string path_of(const std::string& key) const { return where_.empty() ? key : where_ + "." + key; }

 private:
  std::string name() const { return where_.empty() ? "config" : where_; }

  fs::path resolve(const std::string& s) const {
    fs::path p(s);
    if (p.is_relative()) p = base_ / p;
    return p.lexically_normal();
  }

  template <typename T>
  static T convert(const json& v, const std::string& where) {
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw ConfigError(fmt::format("{}: expected true or false", where));
      return v.get<bool>();
    } else if constexpr (std::is_integral_v<T>) {
      // Whole-valued floats such as 16e9 are accepted for token budgets.
      double as_double = 0.0;
      if (v.is_number_integer()) {
        if (std::is_unsigned_v<T> && !v.is_number_unsigned())
          throw ConfigError(fmt::format("{}: expected a non-negative integer", where));
        return v.get<T>();
      }
      if (v.is_number_float()) as_double = v.get<double>();
      if (!v.is_number_float() || std::floor(as_double) != as_double || std::abs(as_double) > 9.0e18 ||
          (std::is_unsigned_v<T> && as_double < 0)) {
        throw ConfigError(fmt::format("{}: expected an integer", where));
      }
      return static_cast<T>(as_double);
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) throw ConfigError(fmt::format("{}: expected a number", where));
      return v.get<T>();
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) throw ConfigError(fmt::format("{}: expected a string", where));
      return v.get<std::string>();
    } else if constexpr (requires { typename T::key_type; typename T::mapped_type; }) {
      if (!v.is_object()) throw ConfigError(fmt::format("{}: expected an object", where));
      T out;
      for (const auto& [k, item] : v.items())
        out.emplace(k, convert<typename T::mapped_type>(item, where + "." + k));
      return out;
    } else {
      if (!v.is_array()) throw ConfigError(fmt::format("{}: expected a list", where));
      T out;
      for (std::size_t i = 0; i < v.size(); ++i)
        out.push_back(convert<typename T::value_type>(v[i], fmt::format("{}[{}]", where, i)));
      return out;
    }
  }

  const json& j_;
  std::string where_;
  const fs::path& base_;
  std::set<std::string> seen_;
};

void read_model(Reader r, ModelConfig& m) {
  m.n_layers = r.get("n_layers", m.n_layers);
  m.d_model = r.get("d_model", m.d_model);
  m.n_heads = r.get("n_heads", m.n_heads);
  m.d_ff = r.get("d_ff", m.d_ff);
  m.context_length = r.get("context_length", m.context_length);
  m.rope_base = r.get("rope_base", m.rope_base);
  m.vocab_size = r.maybe<std::size_t>("vocab_size");
  r.finish();
}

void read_schedule(Reader r, ScheduleSpec& s) {
  s.peak_rate = r.get("peak_rate", s.peak_rate);
  s.final_rate = r.get("final_rate", s.final_rate);
  s.warmup_steps = r.get("warmup_steps", s.warmup_steps);
  s.total_steps = r.get("total_steps", s.total_steps);
  r.finish();
  s.validate();
}

void read_optimizer(Reader r, AdamConfig& a) {
  a.beta1 = r.get("beta1", a.beta1);
  a.beta2 = r.get("beta2", a.beta2);
  a.eps = r.get("eps", a.eps);
  a.weight_decay = r.get("weight_decay", a.weight_decay);
  a.clip_norm = r.get("clip_norm", a.clip_norm);
  r.finish();
}

void read_tokenizer(Reader r, TokenizerConfig& t) {
  t.vocab = r.file("vocab");
  t.base = r.file("base");
  t.train_corpora = r.files("train_corpora");
  t.merges = r.get("merges", t.merges);
  t.extend_corpora = r.files("extend_corpora");
  t.extension_fraction = r.get("extension_fraction", t.extension_fraction);
  t.reserved_tokens = r.get("reserved_tokens", t.reserved_tokens);
  t.fertility_corpora = r.file_map("fertility_corpora");
  r.finish();
  if (t.merges < 0) throw ConfigError("tokenizer.merges must be non-negative");
}

void read_langid(Reader r, LangidConfig& l) {
  l.training = r.file("training");
  l.profiles = r.file("profiles");
  l.input = r.file("input");
  l.range.min_n = r.get("min_n", l.range.min_n);
  l.range.max_n = r.get("max_n", l.range.max_n);
  l.target = r.get("target", l.target);
  l.margin = r.get("margin", l.margin);
  r.finish();
  if (l.range.min_n == 0 || l.range.min_n > l.range.max_n) {
    throw ConfigError("langid n-gram range needs 1 <= min_n <= max_n");
  }
}

MixSpec read_mix(Reader r) {
  MixSpec m;
  m.total_tokens = r.require<std::int64_t>("total_tokens");
  m.ratios = r.require<std::map<std::string, double>>("ratios");
  r.finish();
  m.validate();
  return m;
}

CurriculumConfig read_curriculum(Reader r) {
  CurriculumConfig c;
  c.total_tokens = r.require<std::int64_t>("total_tokens");
  c.granularity = r.get("granularity", c.granularity);
  for (auto p : r.list("phases")) {
    Phase phase;
    phase.start_fraction = p.require<double>("start");
    phase.end_fraction = p.require<double>("end");
    phase.ratios = p.require<std::map<std::string, double>>("ratios");
    p.finish();
    c.phases.push_back(std::move(phase));
  }
  c.late_language = r.maybe<std::string>("late_language");
  c.late_start = r.get("late_start", c.late_start);
  c.sizes = r.get("sizes", c.sizes);
  r.finish();
  if (c.phases.empty() == !c.late_language) {
    throw ConfigError("curriculum needs either phases or late_language, not both");
  }
  if (c.total_tokens <= 0 || c.granularity <= 0) {
    throw ConfigError("curriculum total_tokens and granularity must be positive");
  }
  return c;
}

void read_data(Reader r, DataConfig& d) {
  for (auto s : r.list("shards")) {
    ShardSource shard;
    shard.language = s.require<std::string>("language");
    const auto path = s.file("path");
    if (!path) throw ConfigError(fmt::format("{} is required", s.path_of("path")));
    shard.path = *path;
    shard.upsample = s.get("upsample", false);
    s.finish();
    d.shards.push_back(std::move(shard));
  }
  d.batch_tokens = r.get("batch_tokens", d.batch_tokens);
  d.sequence_length = r.get("sequence_length", d.sequence_length);
  d.shuffle_documents = r.get("shuffle_documents", d.shuffle_documents);
  r.finish();
  if (d.batch_tokens <= 0 || d.sequence_length < 2) {
    throw ConfigError("data.batch_tokens must be positive and data.sequence_length at least 2");
  }
}

void read_expansion(Reader r, ExpansionConfig& e) {
  e.checkpoint = r.file("checkpoint");
  e.new_blocks = r.get("new_blocks", e.new_blocks);
  e.placement = r.maybe<std::vector<std::size_t>>("placement");
  e.freeze = r.get("freeze", e.freeze);
  e.extend_embeddings = r.get("extend_embeddings", e.extend_embeddings);
  r.finish();
}

void read_training(Reader r, TrainingConfig& t) {
  t.init = r.file("init");
  t.checkpoint_every = r.get("checkpoint_every", t.checkpoint_every);
  t.phase_checkpoints = r.get("phase_checkpoints", t.phase_checkpoints);
  t.max_steps = r.maybe<std::uint64_t>("max_steps");
  r.finish();
}

void read_sft(Reader r, SftSection& s) {
  s.init = r.file("init");
  s.pairs = r.file("pairs");
  s.validation = r.file("validation");
  s.epochs = r.get("epochs", s.epochs);
  s.pairs_per_step = r.get("pairs_per_step", s.pairs_per_step);
  r.finish();
}

void read_eval(Reader r, EvalSection& e) {
  e.checkpoints = r.files("checkpoints");
  e.corpora = r.file_map("corpora");
  e.items = r.file("items");
  r.finish();
}

void read_ratio(Reader r, RatioSection& s) {
  s.total_tokens = r.require<std::int64_t>("total_tokens");
  for (auto a : r.list("arms")) {
    RatioArmConfig arm;
    arm.name = a.require<std::string>("name");
    arm.ratios = a.require<std::map<std::string, double>>("ratios");
    a.finish();
    s.arms.push_back(std::move(arm));
  }
  r.finish();
  if (s.arms.size() != 2) throw ConfigError(fmt::format("ratio needs exactly 2 arms, got {}", s.arms.size()));
}

std::string path_string(const fs::path& p) { return p.generic_string(); }

json paths_json(const std::vector<fs::path>& paths) {
  json out = json::array();
  for (const auto& p : paths) out.push_back(path_string(p));
  return out;
}

json path_map_json(const std::map<std::string, fs::path>& paths) {
  json out = json::object();
  for (const auto& [k, p] : paths) out[k] = path_string(p);
  return out;
}

template <typename T>
void put(json& j, const std::string& key, const std::optional<T>& v) {
  if (v) j[key] = *v;
}

void put(json& j, const std::string& key, const std::optional<fs::path>& v) {
  if (v) j[key] = path_string(*v);
}

}  // namespace

ExperimentConfig parse_config(std::string_view text, const fs::path& base_dir,
                              std::optional<std::uint64_t> seed_override) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(fmt::format("config is not valid JSON: {}", e.what()));
  }
  const fs::path base = fs::absolute(base_dir);
  Reader r(j, "", base);
  ExperimentConfig c;
  c.version = r.require<int>("version");
  if (c.version != kConfigVersion) {
    throw ConfigError(fmt::format("config version {} is not supported (expected {})", c.version, kConfigVersion));
  }
  if (seed_override) {
    r.has("seed");
    c.seed = *seed_override;
  } else {
    c.seed = r.require<std::uint64_t>("seed");
  }
  c.output_dir = r.file("output_dir");
  if (auto s = r.section("model")) read_model(*s, c.model);
  if (auto s = r.section("schedule")) read_schedule(*s, c.schedule);
  if (auto s = r.section("optimizer")) read_optimizer(*s, c.optimizer);
  if (auto s = r.section("tokenizer")) read_tokenizer(*s, c.tokenizer);
  if (auto s = r.section("langid")) read_langid(*s, c.langid);
  if (auto s = r.section("mix")) c.mix = read_mix(*s);
  if (auto s = r.section("curriculum")) c.curriculum = read_curriculum(*s);
  if (auto s = r.section("data")) read_data(*s, c.data);
  if (auto s = r.section("expansion")) read_expansion(*s, c.expansion);
  if (auto s = r.section("training")) read_training(*s, c.training);
  if (auto s = r.section("sft")) read_sft(*s, c.sft);
  if (auto s = r.section("eval")) read_eval(*s, c.eval);
  if (auto s = r.section("ratio")) read_ratio(*s, c.ratio);
  r.finish();
  if (c.mix && c.curriculum) throw ConfigError("set either mix or curriculum, not both");
  return c;
}

ExperimentConfig load_config(const fs::path& path, std::optional<std::uint64_t> seed_override) {
  if (!fs::is_regular_file(path)) throw ConfigError(fmt::format("config file {} does not exist", path.string()));
  return parse_config(read_file(path), fs::absolute(path).parent_path(), seed_override);
}

std::string serialize_config(const ExperimentConfig& c) {
  json j;
  j["version"] = c.version;
  j["seed"] = c.seed;
  put(j, "output_dir", c.output_dir);

  json& m = j["model"];
  m["n_layers"] = c.model.n_layers;
  m["d_model"] = c.model.d_model;
  m["n_heads"] = c.model.n_heads;
  m["d_ff"] = c.model.d_ff;
  m["context_length"] = c.model.context_length;
  m["rope_base"] = c.model.rope_base;
  put(m, "vocab_size", c.model.vocab_size);

  j["schedule"] = {{"peak_rate", c.schedule.peak_rate},
                   {"final_rate", c.schedule.final_rate},
                   {"warmup_steps", c.schedule.warmup_steps},
                   {"total_steps", c.schedule.total_steps}};
  j["optimizer"] = {{"beta1", c.optimizer.beta1},
                    {"beta2", c.optimizer.beta2},
                    {"eps", c.optimizer.eps},
                    {"weight_decay", c.optimizer.weight_decay},
                    {"clip_norm", c.optimizer.clip_norm}};

  json& t = j["tokenizer"];
  put(t, "vocab", c.tokenizer.vocab);
  put(t, "base", c.tokenizer.base);
  t["train_corpora"] = paths_json(c.tokenizer.train_corpora);
  t["merges"] = c.tokenizer.merges;
  t["extend_corpora"] = paths_json(c.tokenizer.extend_corpora);
  t["extension_fraction"] = c.tokenizer.extension_fraction;
  t["reserved_tokens"] = c.tokenizer.reserved_tokens;
  t["fertility_corpora"] = path_map_json(c.tokenizer.fertility_corpora);

  json& l = j["langid"];
  put(l, "training", c.langid.training);
  put(l, "profiles", c.langid.profiles);
  put(l, "input", c.langid.input);
  l["min_n"] = c.langid.range.min_n;
  l["max_n"] = c.langid.range.max_n;
  l["target"] = c.langid.target;
  l["margin"] = c.langid.margin;

  if (c.mix) j["mix"] = {{"total_tokens", c.mix->total_tokens}, {"ratios", c.mix->ratios}};
  if (c.curriculum) {
    json& cu = j["curriculum"];
    cu["total_tokens"] = c.curriculum->total_tokens;
    cu["granularity"] = c.curriculum->granularity;
    if (!c.curriculum->phases.empty()) {
      json phases = json::array();
      for (const auto& p : c.curriculum->phases)
        phases.push_back({{"start", p.start_fraction}, {"end", p.end_fraction}, {"ratios", p.ratios}});
      cu["phases"] = phases;
    }
    put(cu, "late_language", c.curriculum->late_language);
    cu["late_start"] = c.curriculum->late_start;
    cu["sizes"] = c.curriculum->sizes;
  }

  json& d = j["data"];
  d["shards"] = json::array();
  for (const auto& s : c.data.shards)
    d["shards"].push_back({{"language", s.language}, {"path", path_string(s.path)}, {"upsample", s.upsample}});
  d["batch_tokens"] = c.data.batch_tokens;
  d["sequence_length"] = c.data.sequence_length;
  d["shuffle_documents"] = c.data.shuffle_documents;

  json& e = j["expansion"];
  put(e, "checkpoint", c.expansion.checkpoint);
  e["new_blocks"] = c.expansion.new_blocks;
  put(e, "placement", c.expansion.placement);
  e["freeze"] = c.expansion.freeze;
  e["extend_embeddings"] = c.expansion.extend_embeddings;

  json& tr = j["training"];
  put(tr, "init", c.training.init);
  tr["checkpoint_every"] = c.training.checkpoint_every;
  tr["phase_checkpoints"] = c.training.phase_checkpoints;
  put(tr, "max_steps", c.training.max_steps);

  json& s = j["sft"];
  put(s, "init", c.sft.init);
  put(s, "pairs", c.sft.pairs);
  put(s, "validation", c.sft.validation);
  s["epochs"] = c.sft.epochs;
  s["pairs_per_step"] = c.sft.pairs_per_step;

  json& ev = j["eval"];
  ev["checkpoints"] = paths_json(c.eval.checkpoints);
  ev["corpora"] = path_map_json(c.eval.corpora);
  put(ev, "items", c.eval.items);

  if (!c.ratio.arms.empty()) {
    json arms = json::array();
    for (const auto& a : c.ratio.arms) arms.push_back({{"name", a.name}, {"ratios", a.ratios}});
    j["ratio"] = {{"total_tokens", c.ratio.total_tokens}, {"arms", arms}};
  }
  return j.dump(2) + "\n";
}

std::string config_hash(const ExperimentConfig& config) {
  ExperimentConfig copy = config;
  copy.output_dir.reset();
  return hex64(fnv1a64(serialize_config(copy)));
}

const fs::path& require_file(const std::optional<fs::path>& path, std::string_view what) {
  if (!path) throw ConfigError(fmt::format("{} is required for this command", what));
  if (!fs::is_regular_file(*path)) {
    throw ConfigError(fmt::format("{} {} does not exist", what, path->string()));
  }
  return *path;
}

void require_files(const std::vector<fs::path>& paths, std::string_view what) {
  if (paths.empty()) throw ConfigError(fmt::format("{} is required for this command", what));
  for (const auto& p : paths) require_file(p, what);
}

}  // namespace cptlab
