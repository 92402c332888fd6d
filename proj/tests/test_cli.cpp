// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <json.hpp>
#include <sstream>

#include "commands.hpp"
#include "cptlab/checkpoint.hpp"
#include "cptlab/config.hpp"
#include "cptlab/error.hpp"
#include "cptlab/mixer.hpp"
#include "cptlab/text.hpp"
#include "cptlab/tokenizer.hpp"
#include "support.hpp"

using namespace cptlab;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  int code = 0;
  std::string out;
  std::string err;
};

Outcome invoke(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

fs::path write_config(const fs::path& dir, const std::string& name, const json& j) {
  const auto path = dir / name;
  write_file_atomic(path, j.dump(2));
  return path;
}

json base_config() {
  const auto sample = test::data_dir() / "sample";
  return {{"version", 1},
          {"seed", 5},
          {"model", {{"n_layers", 2}, {"d_model", 16}, {"n_heads", 2}, {"d_ff", 32}, {"context_length", 32}}},
          {"schedule", {{"peak_rate", 3e-3}, {"final_rate", 3e-4}, {"warmup_steps", 2}, {"total_steps", 12}}},
          {"mix", {{"total_tokens", 1536}, {"ratios", {{"de", 1}, {"bar", 1}}}}},
          {"data",
           {{"shards",
             {{{"language", "de"}, {"path", (sample / "de.txt").string()}},
              {{"language", "bar"}, {"path", (sample / "bar.txt").string()}}}},
            {"batch_tokens", 128},
            {"sequence_length", 33}}},
          {"eval", {{"corpora", {{"bar", (sample / "bar.txt").string()}}}}}};
}

std::string artifact_hash(const fs::path& run_dir, const std::string& name) {
  return json::parse(read_file(run_dir / "run.json")).at("artifacts").at(name).get<std::string>();
}

}  // namespace

TEST_CASE("mix plan writes the full-size allocations") {
  const auto dir = test::scratch_dir("cli-mix");
  const auto cfg = write_config(dir, "c.json",
                                {{"version", 1},
                                 {"seed", 1},
                                 {"mix", {{"total_tokens", 16'000'000'000LL}, {"ratios", {{"en", 9}, {"de", 1}}}}}});
  const auto r = invoke({"mix", "plan", "--config", cfg.string(), "--out", (dir / "out").string()});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  const auto plan = parse_plan(read_file(dir / "out" / "plan.tsv"));
  CHECK(plan.language_totals() == Allocation{{"de", 1'600'000'000}, {"en", 14'400'000'000}});
  const auto record = json::parse(read_file(dir / "out" / "run.json"));
  CHECK(record.at("command") == "mix plan");
  CHECK(record.at("seed") == 1);
  CHECK(record.at("config_hash").get<std::string>().size() == 16);
  CHECK(record.at("versions").contains("cptlab"));
  CHECK(fs::exists(dir / "out" / "config.json"));
}

TEST_CASE("errors are one machine-parsable line") {
  const auto dir = test::scratch_dir("cli-errors");
  auto j = base_config();
  j["model"]["heads"] = 4;
  auto r = invoke({"model", "init", "--config", write_config(dir, "a.json", j).string(), "--out", dir.string()});
  CHECK(r.code == 1);
  CHECK(r.err == "ConfigError: unknown key model.heads\n");

  j = base_config();
  j.erase("seed");
  const auto no_seed = write_config(dir, "b.json", j);
  r = invoke({"model", "init", "--config", no_seed.string(), "--out", dir.string()});
  CHECK(r.err.rfind("ConfigError: seed is required", 0) == 0);
  r = invoke({"model", "init", "--config", no_seed.string(), "--out", (dir / "o").string(), "--seed", "9"});
  CHECK(r.code == 0);
  CHECK(json::parse(read_file(dir / "o" / "run.json")).at("seed") == 9);

  j = base_config();
  j["version"] = 2;
  r = invoke({"model", "init", "--config", write_config(dir, "c.json", j).string(), "--out", dir.string()});
  CHECK(r.err.rfind("ConfigError: config version 2", 0) == 0);

  j = base_config();
  j["tokenizer"] = {{"vocab", "missing/vocab.txt"}};
  r = invoke({"model", "init", "--config", write_config(dir, "d.json", j).string(), "--out", dir.string()});
  CHECK(r.code == 1);
  CHECK(r.err.rfind("ConfigError: tokenizer.vocab", 0) == 0);
  // Commands that do not read the tokenizer do not care.
  r = invoke({"mix", "plan", "--config", (dir / "d.json").string(), "--out", (dir / "p").string()});
  CHECK(r.code == 0);

  j = base_config();
  j["mix"]["total_tokens"] = "many";
  r = invoke({"mix", "plan", "--config", write_config(dir, "e.json", j).string(), "--out", dir.string()});
  CHECK(r.err == "ConfigError: mix.total_tokens: expected an integer\n");

  r = invoke({"mix", "blend", "--config", "x"});
  CHECK(r.code == 2);
  CHECK(r.err.rfind("UsageError: ", 0) == 0);
  CHECK(std::count(r.err.begin(), r.err.end(), '\n') == 1);

  r = invoke({"mix", "plan"});
  CHECK(r.err == "ConfigError: --config is required\n");
}

TEST_CASE("outputs never overwrite inputs") {
  const auto dir = test::scratch_dir("cli-inputs");
  write_file_atomic(dir / "text.txt", "hallo welt\n");
  auto j = base_config();
  j["tokenizer"] = {{"train_corpora", {(dir / "vocab.txt").string()}}, {"merges", 5}};
  write_file_atomic(dir / "vocab.txt", "servus\n");
  const auto cfg = write_config(dir, "c.json", j);
  const auto r = invoke({"tok", "train", "--config", cfg.string(), "--out", dir.string()});
  CHECK(r.code == 1);
  CHECK(r.err.find("would overwrite an input") != std::string::npos);
  CHECK(read_file(dir / "vocab.txt") == "servus\n");
}

TEST_CASE("tokenizer and language id commands") {
  const auto dir = test::scratch_dir("cli-tok");
  const auto sample = test::data_dir() / "sample";
  json j = base_config();
  j["tokenizer"] = {{"train_corpora", {(sample / "en.txt").string(), (sample / "de.txt").string()}},
                    {"merges", 300},
                    {"base", (dir / "base" / "vocab.txt").string()},
                    {"vocab", (dir / "ext" / "vocab.txt").string()},
                    {"extend_corpora", {(sample / "de.txt").string(), (sample / "bar.txt").string()}},
                    {"extension_fraction", 0.2},
                    {"reserved_tokens", 0},
                    {"fertility_corpora", {{"bar", (sample / "bar.txt").string()}}}};
  j["langid"] = {{"training", (test::data_dir() / "langid" / "de_bar.tsv").string()},
                 {"profiles", (dir / "lid" / "profiles.txt").string()},
                 {"input", (sample / "bar.txt").string()},
                 {"target", "bar"}};
  const auto cfg = write_config(dir, "c.json", j).string();

  auto r = invoke({"tok", "train", "--config", cfg, "--out", (dir / "base").string()});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  CHECK(load_vocabulary(dir / "base" / "vocab.txt").size() == 556);
  r = invoke({"tok", "extend", "--config", cfg, "--out", (dir / "ext").string()});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  const auto ext = json::parse(read_file(dir / "ext" / "extension.json"));
  CHECK(ext.at("requested") == 111);
  r = invoke({"tok", "fertility", "--config", cfg, "--out", (dir / "fert").string()});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  const auto rows = read_lines(dir / "fert" / "fertility.tsv");
  REQUIRE(rows.size() == 3);
  auto fert = [](const std::string& row) { return std::stod(row.substr(row.rfind('\t') + 1)); };
  CHECK(fert(rows[2]) < fert(rows[1]));

  write_file_atomic(dir / "in.txt", "Servus mitanand\n");
  r = invoke({"tok", "encode", (dir / "in.txt").string(), "--config", cfg, "--out", (dir / "enc").string()});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  std::vector<TokenId> ids;
  std::istringstream in(read_lines(dir / "enc" / "encoded.txt").at(0));
  for (TokenId id; in >> id;) ids.push_back(id);
  CHECK(load_vocabulary(dir / "ext" / "vocab.txt").decode(ids) == "Servus mitanand");

  r = invoke({"langid", "train", "--config", cfg, "--out", (dir / "lid").string()});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  r = invoke({"langid", "filter", "--config", cfg, "--out", (dir / "filter").string()});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  const auto counts = json::parse(read_file(dir / "filter" / "filter.json"));
  CHECK(counts.at("lines") == 113);
  CHECK(counts.at("kept").get<int>() + counts.at("rejected").get<int>() == 113);
  CHECK(counts.at("kept").get<int>() > 100);
}

TEST_CASE("expansion leaves perplexity unchanged") {
  const auto dir = test::scratch_dir("cli-expand");
  json j = base_config();
  j["expansion"] = {{"checkpoint", (dir / "init" / "init.ckpt").string()}, {"new_blocks", 2}};
  j["eval"]["checkpoints"] = {(dir / "init" / "init.ckpt").string(), (dir / "exp" / "expanded.ckpt").string()};
  const auto cfg = write_config(dir, "c.json", j).string();
  REQUIRE(invoke({"model", "init", "--config", cfg, "--out", (dir / "init").string()}).code == 0);
  auto r = invoke({"model", "expand", "--config", cfg, "--out", (dir / "exp").string()});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  const auto expanded = load_checkpoint(dir / "exp" / "expanded.ckpt");
  CHECK(expanded.spec.n_layers == 4);
  CHECK_FALSE(expanded.params.frozen.empty());
  r = invoke({"eval", "ppl", "--config", cfg, "--out", (dir / "eval").string()});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  const auto rows = read_lines(dir / "eval" / "eval.tsv");
  REQUIRE(rows.size() == 3);
  auto field = [](const std::string& row, int k) {
    std::stringstream ss(row);
    std::string f;
    for (int i = 0; i <= k; ++i) std::getline(ss, f, '\t');
    return f;
  };
  CHECK(field(rows[1], 2) == field(rows[2], 2));
}

TEST_CASE("resume reproduces the uninterrupted run and records replay") {
  const auto dir = test::scratch_dir("cli-resume");
  json j = base_config();
  const auto full_cfg = write_config(dir, "full.json", j).string();
  j["training"] = {{"max_steps", 5}};
  const auto part_cfg = write_config(dir, "part.json", j).string();

  auto r = invoke({"train", "pretrain", "--config", full_cfg, "--out", (dir / "full").string()});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  r = invoke({"train", "pretrain", "--config", part_cfg, "--out", (dir / "part").string()});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  CHECK(load_checkpoint(dir / "part" / "checkpoints" / "final.ckpt").step == 5);
  r = invoke({"train", "resume", (dir / "part" / "checkpoints" / "final.ckpt").string(), "--config", full_cfg, "--out",
           (dir / "resumed").string()});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  const auto full = read_file(dir / "full" / "checkpoints" / "final.ckpt");
  CHECK(read_file(dir / "resumed" / "checkpoints" / "final.ckpt") == full);
  CHECK(load_checkpoint(dir / "full" / "checkpoints" / "final.ckpt").step == 12);

  // Replaying the recorded config reproduces every non-timing artifact.
  r = invoke({"train", "pretrain", "--config", (dir / "full" / "config.json").string(), "--out",
           (dir / "replay").string()});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  CHECK(artifact_hash(dir / "replay", "checkpoints/final.ckpt") == artifact_hash(dir / "full", "checkpoints/final.ckpt"));
  CHECK(artifact_hash(dir / "replay", "metrics.jsonl") == "volatile");
  CHECK(json::parse(read_file(dir / "replay" / "run.json")).at("config_hash") ==
        json::parse(read_file(dir / "full" / "run.json")).at("config_hash"));
}

TEST_CASE("stream audit checks conservation") {
  const auto dir = test::scratch_dir("cli-audit");
  json j = base_config();
  j.erase("mix");
  j["curriculum"] = {{"total_tokens", 1536}, {"phases", json::array({{{"start", 0}, {"end", 0.5}, {"ratios", {{"de", 1}}}},
                                                                      {{"start", 0.5}, {"end", 1}, {"ratios", {{"de", 1}, {"bar", 1}}}}})}};
  const auto cfg = write_config(dir, "c.json", j).string();
  const auto r = invoke({"mix", "stream-audit", "--config", cfg, "--out", dir.string() + "/out"});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  CHECK(r.out.find("allocations conserved") != std::string::npos);
  const auto manifest = parse_manifest(read_file(dir / "out" / "manifest.tsv"));
  CHECK(manifest.size() == 2);
  std::int64_t bar = 0;
  for (const auto& row : read_lines(dir / "out" / "audit.tsv")) {
    if (row.find("\tbar\t") != std::string::npos) bar += std::stoll(row.substr(row.rfind('\t') + 1));
  }
  CHECK(bar == 384);
}

TEST_CASE("sft, choices and ratio commands") {
  const auto dir = test::scratch_dir("cli-sft");
  json j = base_config();
  j["model"]["context_length"] = 256;
  j["sft"] = {{"init", (dir / "init" / "init.ckpt").string()},
              {"pairs", (test::data_dir() / "sft" / "train.jsonl").string()},
              {"validation", (test::data_dir() / "sft" / "valid.jsonl").string()},
              {"epochs", 2},
              {"pairs_per_step", 8}};
  j["schedule"] = {{"peak_rate", 1e-3}, {"final_rate", 1e-4}, {"warmup_steps", 1}, {"total_steps", 6}};
  j["eval"]["checkpoints"] = {(dir / "init" / "init.ckpt").string()};
  j["eval"]["items"] = (test::data_dir() / "eval" / "items.jsonl").string();
  const auto cfg = write_config(dir, "c.json", j).string();
  REQUIRE(invoke({"model", "init", "--config", cfg, "--out", (dir / "init").string()}).code == 0);
  auto r = invoke({"train", "sft", "--config", cfg, "--out", (dir / "sft").string()});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  CHECK(fs::exists(dir / "sft" / "sft" / "epoch-1.ckpt"));
  CHECK(fs::exists(dir / "sft" / "sft" / "epoch-2.ckpt"));
  const auto rows = read_lines(dir / "sft" / "sft.tsv");
  CHECK(rows.size() == 3);

  r = invoke({"eval", "choices", "--config", cfg, "--out", (dir / "choices").string()});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  CHECK(read_lines(dir / "choices" / "choices.tsv").size() == 3);

  json k = base_config();
  k.erase("mix");
  k["schedule"]["total_steps"] = 4;
  k["ratio"] = {{"total_tokens", 512},
                {"arms", json::array({{{"name", "even"}, {"ratios", {{"de", 1}, {"bar", 1}}}},
                                      {{"name", "skewed"}, {"ratios", {{"de", 3}, {"bar", 1}}}}})}};
  r = invoke({"eval", "ratio-ab", "--config", write_config(dir, "r.json", k).string(), "--out", (dir / "ratio").string()});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  CHECK(read_lines(dir / "ratio" / "ratio.tsv").size() == 3);
}

TEST_CASE("config canonical form round-trips") {
  json j = base_config();
  j["expansion"] = {{"new_blocks", 2}, {"placement", {1, 2}}, {"extend_embeddings", true}};
  j["tokenizer"] = {{"vocab", "relative/vocab.txt"}, {"merges", 10}};
  j["output_dir"] = "runs/x";
  const auto base = fs::path("/srv/exp");
  const auto a = parse_config(j.dump(), base);
  CHECK(a.tokenizer.vocab == fs::path("/srv/exp/relative/vocab.txt"));
  CHECK(a.expansion.placement == std::vector<std::size_t>{1, 2});
  const auto text = serialize_config(a);
  const auto b = parse_config(text, "/elsewhere");
  CHECK(serialize_config(b) == text);
  CHECK(config_hash(a) == config_hash(b));
  auto c = b;
  c.output_dir = "/tmp/other";
  CHECK(config_hash(c) == config_hash(b));
  c.seed += 1;
  CHECK(config_hash(c) != config_hash(b));
  CHECK_THROWS_AS(parse_config("{\"version\": 1, \"seed\": -3}", base), ConfigError);
  CHECK_THROWS_AS(parse_config("{\"version\": 1, \"seed\": 1, \"mix\": {\"total_tokens\": 10}}", base), ConfigError);
  CHECK_THROWS_AS(parse_config("[1]", base), ConfigError);
  CHECK(parse_config("{\"version\": 1, \"seed\": 1, \"mix\": {\"total_tokens\": 1.6e10, \"ratios\": {\"a\": 1}}}", base)
            .mix->total_tokens == 16'000'000'000);
}
