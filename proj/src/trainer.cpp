// SPDX-License-Identifier: Apache-2.0
#include "cptlab/trainer.hpp"

#include <fmt/format.h>

#include <chrono>
#include <cmath>
#include <fstream>
#include <json.hpp>

#include "cptlab/error.hpp"
#include "cptlab/text.hpp"

namespace cptlab {

void RunMetrics::add(const StepRecord& record) {
  steps_.push_back(record);
  total_tokens_ += record.tokens;
  total_millis_ += record.millis;
}

double RunMetrics::tokens_per_second() const {
  if (total_millis_ <= 0.0) return 0.0;
  return static_cast<double>(total_tokens_) / total_seconds();
}

std::string metrics_line(const StepRecord& r) {
  const std::string loss = std::isnan(r.loss) ? "null" : fmt::format("{:.17g}", r.loss);
  return fmt::format(R"({{"step":{},"loss":{},"lr":{:.17g},"tokens":{},"millis":{:.3f}}})", r.step, loss,
                     r.learning_rate, r.tokens, r.millis);
}

RunMetrics read_metrics(const std::filesystem::path& path) {
  RunMetrics metrics;
  std::size_t line_no = 0;
  for (const auto& line : read_lines(path)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      metrics.add(StepRecord{j.at("step").get<std::uint64_t>(), j.at("loss").is_null() ? std::nan("") : j.at("loss").get<double>(),
                             j.at("lr").get<double>(), j.at("tokens").get<std::int64_t>(),
                             j.at("millis").get<double>()});
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(fmt::format("{}:{}: bad metrics record: {}", path.string(), line_no, e.what()));
    }
  }
  return metrics;
}

namespace {

// Weighted combination sum_i w_i * loss_i / sum_i w_i.
Var weighted_mean(const std::vector<Var>& losses, const std::vector<double>& weights) {
  double total = 0.0;
  for (double w : weights) total += w;
  Var out = scale(losses[0], weights[0] / total);
  for (std::size_t i = 1; i < losses.size(); ++i) out = add(out, scale(losses[i], weights[i] / total));
  return out;
}

void save_to(const std::filesystem::path& dir, const std::string& name, const Checkpoint& ckpt,
             std::vector<SavedCheckpoint>& saved, const std::string& reason) {
  if (dir.empty()) return;
  std::filesystem::create_directories(dir);
  const auto path = dir / name;
  save_checkpoint(ckpt, path);
  saved.push_back(SavedCheckpoint{ckpt.step, reason, path});
}

}  // namespace

std::optional<Var> batch_loss(Tape& tape, const BoundParameters& params, const ModelSpec& spec,
                              const Batch& batch) {
  std::vector<Var> losses;
  std::vector<double> weights;
  for (const auto& seq : batch.sequences) {
    if (seq.tokens.size() < 2) continue;
    losses.push_back(sequence_loss(tape, params, spec, seq.tokens));
    weights.push_back(static_cast<double>(seq.tokens.size() - 1));
  }
  if (losses.empty()) return std::nullopt;
  return weighted_mean(losses, weights);
}

Gradients collect_gradients(const Tape& tape, const BoundParameters& bound,
                            const ParameterSet& params) {
  Gradients grads;
  for (const auto& [path, var] : bound.vars) {
    if (params.fully_frozen(path)) continue;
    grads.emplace(path, tape.gradient(var));
  }
  return grads;
}

PretrainResult pretrain(Checkpoint start, BatchSource& stream, const TrainConfig& config) {
  config.schedule.validate();
  start.spec.validate();
  start.params.validate(start.spec);
  if (!start.optimizer) start.optimizer = make_optimizer_state(config.adam);

  PretrainResult result;
  result.final = std::move(start);
  Checkpoint& state = result.final;

  std::optional<std::size_t> last_phase;
  for (std::uint64_t i = 0; i < state.batches_consumed; ++i) {
    auto skipped = stream.next();
    if (!skipped) {
      throw DataError(fmt::format("batch stream ended after {} batches; checkpoint consumed {}", i,
                                  state.batches_consumed));
    }
    last_phase = skipped->phase;
  }

  std::ofstream metrics_out;
  if (!config.metrics_path.empty()) {
    metrics_out.open(config.metrics_path, std::ios::app);
    if (!metrics_out) throw IoError(fmt::format("cannot open {}", config.metrics_path.string()));
  }
  auto checkpoint = [&](const std::string& name, const std::string& reason) {
    if (metrics_out.is_open()) metrics_out.flush();
    save_to(config.checkpoint_dir, name, state, result.saved, reason);
  };
  auto fail = [&](const std::string& what) {
    checkpoint(fmt::format("diagnostic-step-{:08}.ckpt", state.step), "diagnostic");
    throw TrainingError(fmt::format("step {}: {}", state.step + 1, what));
  };

  while (true) {
    if (config.stop_at_step && state.step >= *config.stop_at_step) {
      result.reason = StopReason::stop_requested;
      break;
    }
    if (state.step >= config.schedule.total_steps) {
      result.reason = StopReason::schedule_complete;
      break;
    }
    auto batch = stream.next();
    if (!batch) {
      result.reason = StopReason::stream_exhausted;
      break;
    }
    if (config.checkpoint_at_phase_boundary && last_phase && batch->phase != *last_phase) {
      checkpoint(fmt::format("phase-{}-step-{:08}.ckpt", batch->phase, state.step), "phase");
    }
    last_phase = batch->phase;

    const auto t0 = std::chrono::steady_clock::now();
    Tape tape;
    const auto bound = bind_parameters(tape, state.params, true);
    const auto loss = batch_loss(tape, bound, state.spec, *batch);
    if (!loss) {
      ++state.batches_consumed;
      const StepRecord record{state.step, std::nan(""), 0.0, batch->token_count(),
                              std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count()};
      result.metrics.add(record);
      if (metrics_out.is_open()) metrics_out << metrics_line(record) << '\n';
      continue;
    }
    const double loss_value = loss->value().data[0];
    if (!std::isfinite(loss_value)) fail(fmt::format("loss is {}", loss_value));
    tape.backward(*loss);
    const auto grads = collect_gradients(tape, bound, state.params);
    const double lr = lr_at(config.schedule, state.step + 1);
    try {
      apply_update(state.params, grads, *state.optimizer, lr);
    } catch (const TrainingError& e) {
      fail(e.what());
    }
    ++state.step;
    ++state.batches_consumed;
    const auto t1 = std::chrono::steady_clock::now();

    const StepRecord record{state.step, loss_value, lr, batch->token_count(),
                            std::chrono::duration<double, std::milli>(t1 - t0).count()};
    result.metrics.add(record);
    if (metrics_out.is_open()) metrics_out << metrics_line(record) << '\n';
    if (config.checkpoint_every > 0 && state.step % config.checkpoint_every == 0) {
      checkpoint(fmt::format("step-{:08}.ckpt", state.step), "cadence");
    }
  }
  checkpoint("final.ckpt", "final");
  return result;
}

// ---------------------------------------------------------------------------
// Instruction tuning

FormattedExample format_instruction(const InstructionPair& pair, const Vocabulary& vocab) {
  if (pair.instruction.empty()) throw DataError("instruction pair has an empty instruction");
  if (pair.response.empty()) throw DataError("instruction pair has an empty response");
  FormattedExample out;
  auto append = [&](const std::vector<TokenId>& ids, bool in_loss) {
    out.tokens.insert(out.tokens.end(), ids.begin(), ids.end());
    out.loss_mask.insert(out.loss_mask.end(), ids.size(), in_loss);
  };
  append({kInstructionMark}, false);
  append(vocab.encode(pair.instruction), false);
  if (pair.context && !pair.context->empty()) {
    append({kContextMark}, false);
    append(vocab.encode(*pair.context), false);
  }
  append({kResponseMark}, false);
  append(vocab.encode(pair.response), true);
  append({kEndMark}, false);
  return out;
}

std::vector<InstructionPair> read_instruction_pairs(const std::filesystem::path& path) {
  std::vector<InstructionPair> pairs;
  std::size_t line_no = 0;
  for (const auto& line : read_lines(path)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      InstructionPair p;
      p.instruction = j.at("instruction").get<std::string>();
      if (j.contains("context") && !j.at("context").is_null()) {
        p.context = j.at("context").get<std::string>();
      }
      p.response = j.at("response").get<std::string>();
      p.language = j.value("language", std::string());
      pairs.push_back(std::move(p));
    } catch (const nlohmann::json::exception& e) {
      throw DataError(fmt::format("{}:{}: bad instruction record: {}", path.string(), line_no, e.what()));
    }
  }
  return pairs;
}

double response_token_accuracy(const ParameterSet& params, const ModelSpec& spec,
                               const std::vector<FormattedExample>& examples) {
  std::size_t hits = 0;
  std::size_t total = 0;
  for (const auto& ex : examples) {
    const std::span<const TokenId> input(ex.tokens.data(), ex.tokens.size() - 1);
    const Tensor logits = forward(params, spec, input);
    const std::size_t v = logits.shape[1];
    for (std::size_t i = 0; i + 1 < ex.tokens.size(); ++i) {
      if (!ex.loss_mask[i + 1]) continue;
      const double* row = &logits.data[i * v];
      std::size_t best = 0;
      for (std::size_t j = 1; j < v; ++j)
        if (row[j] > row[best]) best = j;
      hits += best == ex.tokens[i + 1];
      ++total;
    }
  }
  return total == 0 ? 0.0 : static_cast<double>(hits) / static_cast<double>(total);
}

std::uint64_t sft_steps(std::size_t pairs, const SftConfig& config) {
  if (config.pairs_per_step == 0) throw ConfigError("sft: pairs_per_step must be positive");
  const std::uint64_t per_epoch = (pairs + config.pairs_per_step - 1) / config.pairs_per_step;
  return per_epoch * config.epochs;
}

SftResult sft(Checkpoint start, const std::vector<FormattedExample>& examples,
              const SftConfig& config, const Validator& validate) {
  if (config.epochs == 0) throw ConfigError("sft: epochs must be at least 1");
  if (examples.empty()) throw DataError("sft: no instruction pairs");
  config.schedule.validate();
  const auto steps = sft_steps(examples.size(), config);
  if (config.schedule.total_steps < steps) {
    throw ConfigError(fmt::format("sft: schedule has {} steps, run needs {}",
                                  config.schedule.total_steps, steps));
  }
  for (std::size_t i = 0; i < examples.size(); ++i) {
    if (examples[i].tokens.size() > start.spec.context_length + 1) {
      throw DataError(fmt::format("sft: pair {} has {} tokens, context allows {}", i,
                                  examples[i].tokens.size(), start.spec.context_length + 1));
    }
  }

  start.params.frozen.clear();
  start.params.frozen_rows.clear();
  start.optimizer = make_optimizer_state(config.adam);
  start.step = 0;
  start.batches_consumed = 0;
  Checkpoint state = std::move(start);

  SftResult result;
  std::vector<SavedCheckpoint> saved;
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    std::vector<std::size_t> order(examples.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng(derive_seed(config.seed, fmt::format("sft-epoch-{}", epoch)));
    rng.shuffle(order);

    for (std::size_t begin = 0; begin < order.size(); begin += config.pairs_per_step) {
      const auto t0 = std::chrono::steady_clock::now();
      const std::size_t end = std::min(order.size(), begin + config.pairs_per_step);
      Tape tape;
      const auto bound = bind_parameters(tape, state.params, true);
      std::vector<Var> losses;
      std::vector<double> weights;
      std::int64_t tokens = 0;
      for (std::size_t k = begin; k < end; ++k) {
        const auto& ex = examples[order[k]];
        std::vector<double> w(ex.tokens.size() - 1);
        double sum = 0.0;
        for (std::size_t i = 0; i < w.size(); ++i) sum += w[i] = ex.loss_mask[i + 1] ? 1.0 : 0.0;
        tokens += static_cast<std::int64_t>(ex.tokens.size());
        if (sum == 0.0) continue;
        losses.push_back(sequence_loss(tape, bound, state.spec, ex.tokens, w));
        weights.push_back(sum);
      }
      if (losses.empty()) throw DataError("sft: step without response tokens");
      const Var loss = weighted_mean(losses, weights);
      const double loss_value = loss.value().data[0];
      if (!std::isfinite(loss_value)) {
        throw TrainingError(fmt::format("sft step {}: loss is {}", state.step + 1, loss_value));
      }
      tape.backward(loss);
      const double lr = lr_at(config.schedule, state.step + 1);
      apply_update(state.params, collect_gradients(tape, bound, state.params), *state.optimizer, lr);
      ++state.step;
      ++state.batches_consumed;
      const auto t1 = std::chrono::steady_clock::now();
      result.metrics.add(StepRecord{state.step, loss_value, lr, tokens,
                                    std::chrono::duration<double, std::milli>(t1 - t0).count()});
    }

    EpochCheckpoint ec{epoch, state, validate(state.params, state.spec, epoch), {}};
    save_to(config.checkpoint_dir, fmt::format("epoch-{}.ckpt", epoch), state, saved, "epoch");
    if (!saved.empty()) ec.path = saved.back().path;
    result.epochs.push_back(std::move(ec));
  }
  for (std::size_t i = 1; i < result.epochs.size(); ++i) {
    if (result.epochs[i].score > result.epochs[result.selected].score) result.selected = i;
  }
  return result;
}

}  // namespace cptlab
