// SPDX-License-Identifier: Apache-2.0
#include "cptlab/expansion.hpp"

#include <fmt/format.h>

#include <algorithm>

#include "cptlab/error.hpp"

namespace cptlab {

void ExpansionPlan::validate(std::size_t n_layers, std::size_t base_vocab_size) const {
  if (placement.size() != n_new_blocks) {
    throw PlanError(fmt::format("expansion plan: {} placements for {} new blocks", placement.size(),
                                n_new_blocks));
  }
  if (!std::is_sorted(placement.begin(), placement.end())) {
    throw PlanError("expansion plan: insertion indices must be sorted");
  }
  if (!placement.empty() && placement.back() > n_layers) {
    throw PlanError(fmt::format("expansion plan: insertion index {} beyond {} layers",
                                placement.back(), n_layers));
  }
  for (const auto& [id, parts] : new_token_seeds) {
    for (auto part : parts) {
      if (part >= base_vocab_size) {
        throw PlanError(fmt::format("expansion plan: token {} is built from id {} outside the base "
                                    "vocabulary of {}",
                                    id, part, base_vocab_size));
      }
    }
  }
}

std::vector<std::size_t> interleaved_placement(std::size_t n_layers, std::size_t k) {
  std::vector<std::size_t> placement;
  if (k == 0) return placement;
  const std::size_t stride = (n_layers + k - 1) / k;
  for (std::size_t j = 0; j < k; ++j) placement.push_back(std::min((j + 1) * stride, n_layers));
  return placement;
}

std::vector<std::size_t> inserted_layer_indices(const ExpansionPlan& plan) {
  std::vector<std::size_t> out;
  for (std::size_t j = 0; j < plan.placement.size(); ++j) out.push_back(plan.placement[j] + j);
  return out;
}

ExpandedModel expand(const ParameterSet& params, const ModelSpec& spec, const ExpansionPlan& plan,
                     Rng& rng) {
  params.validate(spec);
  plan.validate(spec.n_layers, spec.vocab_size);

  ExpandedModel out{ParameterSet{}, spec};
  out.spec.n_layers = spec.n_layers + plan.n_new_blocks;
  for (const auto& [path, t] : params.tensors) {
    if (param_path::layer_index(path) < 0) out.params.tensors.emplace(path, t);
  }

  const auto d = spec.d_model, ff = spec.d_ff;
  std::size_t next_new = 0;
  std::size_t target = 0;
  auto insert_new_block = [&] {
    for (auto name : param_path::block_matrices) {
      Shape shape{d, d};
      if (name == "w_gate" || name == "w_up") shape = {d, ff};
      if (name == "w_down") shape = {ff, d};
      Tensor t = Tensor::zeros(shape);
      if (name != "wo" && name != "w_down") {
        for (auto& v : t.data) v = rng.normal() * 0.02;
      }
      out.params.tensors.emplace(param_path::layer(target, name), std::move(t));
    }
    for (auto name : param_path::block_norms)
      out.params.tensors.emplace(param_path::layer(target, name), Tensor::filled({d}, 1.0));
    ++target;
    ++next_new;
  };
  for (std::size_t original = 0; original <= spec.n_layers; ++original) {
    while (next_new < plan.placement.size() && plan.placement[next_new] == original) {
      insert_new_block();
    }
    if (original == spec.n_layers) break;
    for (auto name : param_path::block_matrices)
      out.params.tensors.emplace(param_path::layer(target, name),
                                 params.at(param_path::layer(original, name)));
    for (auto name : param_path::block_norms)
      out.params.tensors.emplace(param_path::layer(target, name),
                                 params.at(param_path::layer(original, name)));
    ++target;
  }
  out.params.validate(out.spec);
  return out;
}

ExpandedModel extend_embeddings(const ParameterSet& params, const ModelSpec& spec,
                                const ExpansionPlan& plan) {
  params.validate(spec);
  const std::size_t old_vocab = spec.vocab_size;
  std::size_t expected = old_vocab;
  for (const auto& [id, parts] : plan.new_token_seeds) {
    if (id != expected) {
      throw PlanError(fmt::format("new token ids must continue the vocabulary contiguously; "
                                  "expected {}, got {}",
                                  expected, id));
    }
    if (parts.empty()) throw DerivationError(fmt::format("new token {} has no constituents", id));
    for (auto part : parts) {
      if (part >= old_vocab) {
        throw PlanError(fmt::format("new token {} is built from id {} outside the base vocabulary",
                                    id, part));
      }
    }
    ++expected;
  }

  ExpandedModel out{params, spec};
  out.spec.vocab_size = expected;
  const std::size_t d = spec.d_model;
  for (auto table : {param_path::embedding, param_path::output}) {
    const Tensor& src = params.at(table);
    Tensor grown = Tensor::zeros({expected, d});
    std::copy(src.data.begin(), src.data.end(), grown.data.begin());
    for (const auto& [id, parts] : plan.new_token_seeds) {
      double* row = &grown.data[id * d];
      for (auto part : parts)
        for (std::size_t c = 0; c < d; ++c) row[c] += src.data[part * d + c];
      for (std::size_t c = 0; c < d; ++c) row[c] /= static_cast<double>(parts.size());
    }
    out.params.tensors[std::string(table)] = std::move(grown);
  }
  // A previous row freeze on a table still refers to the same leading rows.
  return out;
}

ParameterSet freeze_backbone(const ParameterSet& params, const ModelSpec& spec,
                             const ExpansionPlan& plan) {
  params.validate(spec);
  if (plan.n_new_blocks > spec.n_layers) {
    throw PlanError("freeze_backbone: plan inserts more blocks than the model holds");
  }
  const std::size_t new_tokens = plan.new_token_seeds.size();
  if (new_tokens > 0) {
    const std::size_t first_new = spec.vocab_size - new_tokens;
    if (plan.new_token_seeds.begin()->first != first_new) {
      throw PlanError("freeze_backbone: embeddings were not extended with this plan's tokens");
    }
  }
  const auto inserted = inserted_layer_indices(plan);
  ParameterSet out = params;
  out.frozen.clear();
  out.frozen_rows.clear();
  for (const auto& [path, t] : out.tensors) {
    const long layer = param_path::layer_index(path);
    if (layer >= 0) {
      if (std::find(inserted.begin(), inserted.end(), static_cast<std::size_t>(layer)) ==
          inserted.end()) {
        out.frozen.insert(path);
      }
      continue;
    }
    const bool table = path == param_path::embedding || path == param_path::output;
    if (table && new_tokens > 0) {
      out.frozen_rows[path] = spec.vocab_size - new_tokens;
    } else {
      out.frozen.insert(path);
    }
  }
  return out;
}

}  // namespace cptlab
