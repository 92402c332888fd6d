// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <map>
#include <vector>

#include "cptlab/model.hpp"
#include "cptlab/rng.hpp"

namespace cptlab {

/// How to grow a trained model.
///
/// `placement[j]` is the index in the original stack before which new block
/// j is inserted; an index equal to n_layers appends at the top. New token
/// ids must sit contiguously above the current vocabulary, each mapped to the
/// base-vocabulary ids it is composed of.
struct ExpansionPlan {
  std::size_t n_new_blocks = 0;
  std::vector<std::size_t> placement;
  std::map<TokenId, std::vector<TokenId>> new_token_seeds;

  /// Throws PlanError unless placement is sorted, sized n_new_blocks and
  /// within [0, n_layers], and every seed id is below base_vocab_size.
  void validate(std::size_t n_layers, std::size_t base_vocab_size) const;
};

/// Interleaves k new blocks evenly: one after every ceil(n_layers / k)
/// original blocks, clamped to the top of the stack.
std::vector<std::size_t> interleaved_placement(std::size_t n_layers, std::size_t k);

struct ExpandedModel {
  ParameterSet params;
  ModelSpec spec;
};

/// Inserts identity blocks: the new attention output projection and FFN
/// down-projection are exactly zero, the other new matrices are drawn like
/// `init_parameters`, new norm gains are 1. Original tensors are copied
/// bitwise under their renumbered paths. Freeze masks are not carried over.
ExpandedModel expand(const ParameterSet& params, const ModelSpec& spec, const ExpansionPlan& plan,
                     Rng& rng);

/// Appends one embedding row and one output row per new token, each the
/// arithmetic mean of its constituents' rows. Throws DerivationError for an
/// empty constituent list.
ExpandedModel extend_embeddings(const ParameterSet& params, const ModelSpec& spec,
                                const ExpansionPlan& plan);

/// Freezes every parameter that existed before expansion. Inserted blocks
/// stay trainable; the two token tables are frozen row-wise so that only the
/// newly appended rows train. `params`/`spec` describe the already expanded
/// model.
ParameterSet freeze_backbone(const ParameterSet& params, const ModelSpec& spec,
                             const ExpansionPlan& plan);

/// Layer indices (in the expanded stack) of the blocks `plan` inserted.
std::vector<std::size_t> inserted_layer_indices(const ExpansionPlan& plan);

}  // namespace cptlab
