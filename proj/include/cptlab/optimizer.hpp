// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "cptlab/model.hpp"
#include "cptlab/tensor.hpp"

namespace cptlab {

using Gradients = std::map<std::string, Tensor>;

/// Adam with decoupled weight decay. Decay applies to rank-2 tensors only.
struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.1;
  /// Global gradient-norm clip over trainable entries; <= 0 disables it.
  double clip_norm = 1.0;

  bool operator==(const AdamConfig&) const = default;
};

struct OptimizerState {
  AdamConfig config;
  std::uint64_t step = 0;
  std::map<std::string, Tensor> first_moment;
  std::map<std::string, Tensor> second_moment;
};

OptimizerState make_optimizer_state(const AdamConfig& config);

/// L2 norm over the trainable entries of `grads` (frozen rows excluded).
double trainable_grad_norm(const ParameterSet& params, const Gradients& grads);

/// One masked update. Frozen tensors and frozen rows are never written and
/// fully frozen tensors never get moment buffers. Returns the pre-clip
/// gradient norm.
double apply_update(ParameterSet& params, const Gradients& grads, OptimizerState& state,
                    double learning_rate);

}  // namespace cptlab
