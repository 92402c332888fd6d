// SPDX-License-Identifier: Apache-2.0
#include "cptlab/optimizer.hpp"

#include <fmt/format.h>

#include <cmath>

#include "cptlab/error.hpp"

namespace cptlab {

OptimizerState make_optimizer_state(const AdamConfig& config) {
  OptimizerState s;
  s.config = config;
  return s;
}

double trainable_grad_norm(const ParameterSet& params, const Gradients& grads) {
  double sq = 0.0;
  for (const auto& [path, g] : grads) {
    const std::size_t start = params.frozen_row_count(path) * g.row_width();
    for (std::size_t i = start; i < g.size(); ++i) sq += g.data[i] * g.data[i];
  }
  return std::sqrt(sq);
}

double apply_update(ParameterSet& params, const Gradients& grads, OptimizerState& state,
                    double lr) {
  const auto& cfg = state.config;
  const double norm = trainable_grad_norm(params, grads);
  if (!std::isfinite(norm)) throw TrainingError("non-finite gradient norm");
  const double clip = (cfg.clip_norm > 0.0 && norm > cfg.clip_norm) ? cfg.clip_norm / norm : 1.0;

  state.step += 1;
  const double bias1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bias2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));

  for (const auto& [path, g] : grads) {
    Tensor& p = params.at(path);
    if (g.shape != p.shape) {
      throw DimensionError(fmt::format("gradient for '{}' has shape {}, parameter {}", path,
                                       shape_string(g.shape), shape_string(p.shape)));
    }
    if (params.fully_frozen(path)) continue;
    auto& m = state.first_moment.try_emplace(path, Tensor::zeros(p.shape)).first->second;
    auto& v = state.second_moment.try_emplace(path, Tensor::zeros(p.shape)).first->second;
    const double decay = p.rank() == 2 ? cfg.weight_decay : 0.0;
    const std::size_t start = params.frozen_row_count(path) * p.row_width();
    for (std::size_t i = start; i < p.size(); ++i) {
      const double gi = g.data[i] * clip;
      m.data[i] = cfg.beta1 * m.data[i] + (1.0 - cfg.beta1) * gi;
      v.data[i] = cfg.beta2 * v.data[i] + (1.0 - cfg.beta2) * gi * gi;
      const double mhat = m.data[i] / bias1;
      const double vhat = v.data[i] / bias2;
      p.data[i] -= lr * (mhat / (std::sqrt(vhat) + cfg.eps) + decay * p.data[i]);
    }
  }
  return norm;
}

}  // namespace cptlab
