// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <span>
#include <vector>

#include "cptlab/tensor.hpp"

namespace cptlab {

class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; only valid while the
/// owning tape is alive and has not been reset.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape; }
};

/// Reverse-mode tape. Every operation appends one node; `backward` walks the
/// nodes in reverse and may run once per recording.
class Tape {
 public:
  using Backward = std::function<void(Tape&, std::size_t self)>;

  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value, bool requires_grad);
  Var constant(Tensor value) { return leaf(std::move(value), false); }

  /// Seeds d(loss)/d(loss) = 1 and propagates. The loss must hold exactly one
  /// element. A second call before `reset()` throws StateError.
  void backward(Var loss);
  void reset();

  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  /// Gradient of the last backward pass; zeros when the node was unreached.
  Tensor gradient(Var v) const;

  std::size_t size() const { return nodes_.size(); }
  bool grad_enabled() const { return grad_enabled_; }

  // Operator plumbing.
  Var record(Tensor value, std::initializer_list<Var> parents, Backward fn);
  std::vector<double>& grad_buffer(std::size_t id);
  const std::vector<double>& node_grad(std::size_t id) const { return *nodes_[id].value.grad; }

 private:
  struct Node {
    Tensor value;
    bool requires_grad = false;
    Backward backward;
  };

  std::vector<Node> nodes_;
  bool grad_enabled_ = true;
  bool backward_done_ = false;
};

// Operators. No operator broadcasts: every shape mismatch is a DimensionError
// naming both shapes.

Var add(Var a, Var b);
Var multiply(Var a, Var b);
Var scale(Var a, double factor);
Var sum(Var a);
Var matmul(Var a, Var b);
Var transpose(Var a);
Var reshape(Var a, Shape shape);
Var silu(Var a);
/// Rows of `table` gathered by id; ids >= rows throw IndexError.
Var embedding_lookup(Var table, std::span<const std::uint32_t> ids);
/// y = x / sqrt(mean(x^2) + eps) * gain, per row of a [T x d] input.
Var rms_norm(Var x, Var gain, double eps = 1e-6);
/// Rotates consecutive pairs inside each head by angle pos * base^(-2i/head_dim).
Var rotary_position_encode(Var x, std::size_t n_heads, double base,
                           std::size_t position_offset = 0);
/// Row-softmaxed causal scores for every head: output is [n_heads*T x T] with
/// row h*T+t holding softmax_j<=t(q_t . k_j / sqrt(head_dim)) and exact zeros
/// above the diagonal.
Var causal_attention_scores(Var q, Var k, std::size_t n_heads);
/// Per-head weighted sum of value rows using the scores above; output [T x d].
Var attention_combine(Var scores, Var v, std::size_t n_heads);
/// Weighted mean negative log-likelihood over the rows of [B x V] logits.
/// Empty `weights` means every row counts once.
Var softmax_cross_entropy(Var logits, std::span<const std::uint32_t> targets,
                          std::span<const double> weights = {});

/// log p(target) for every row, computed with the same stabilized
/// log-sum-exp as softmax_cross_entropy.
std::vector<double> target_log_likelihoods(const Tensor& logits,
                                           std::span<const std::uint32_t> targets);

}  // namespace cptlab
