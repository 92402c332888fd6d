// SPDX-License-Identifier: Apache-2.0
#include "cptlab/autograd.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>

#include "cptlab/error.hpp"

namespace cptlab {

const Tensor& Var::value() const {
  if (tape == nullptr) throw StateError("use of an unbound Var");
  return tape->value(id);
}

Var Tape::leaf(Tensor value, bool requires_grad) {
  nodes_.push_back(Node{std::move(value), requires_grad && grad_enabled_, nullptr});
  return Var{this, nodes_.size() - 1};
}

Var Tape::record(Tensor value, std::initializer_list<Var> parents, Backward fn) {
  bool needs = false;
  if (grad_enabled_) {
    for (const auto& p : parents) {
      if (p.tape != this) throw StateError("operands recorded on different tapes");
      needs = needs || nodes_[p.id].requires_grad;
    }
  }
  nodes_.push_back(Node{std::move(value), needs, needs ? std::move(fn) : nullptr});
  return Var{this, nodes_.size() - 1};
}

std::vector<double>& Tape::grad_buffer(std::size_t id) {
  auto& t = nodes_[id].value;
  if (!t.grad) t.grad.emplace(t.data.size(), 0.0);
  return *t.grad;
}

void Tape::backward(Var loss) {
  if (loss.tape != this) throw StateError("backward on a Var from another tape");
  if (backward_done_) throw StateError("backward already ran on this tape; reset it first");
  if (nodes_[loss.id].value.size() != 1) {
    throw DimensionError(fmt::format("backward needs a scalar loss, got shape {}",
                                     shape_string(nodes_[loss.id].value.shape)));
  }
  backward_done_ = true;
  if (!nodes_[loss.id].requires_grad) return;
  grad_buffer(loss.id)[0] = 1.0;
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    auto& node = nodes_[i];
    if (node.backward && node.value.grad) node.backward(*this, i);
  }
}

void Tape::reset() {
  nodes_.clear();
  backward_done_ = false;
}

Tensor Tape::gradient(Var v) const {
  const auto& t = nodes_.at(v.id).value;
  Tensor g = Tensor::zeros(t.shape);
  if (t.grad) g.data = *t.grad;
  return g;
}

namespace {

Tape& tape_of(Var a) {
  if (a.tape == nullptr) throw StateError("use of an unbound Var");
  return *a.tape;
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape != b.shape) {
    throw DimensionError(fmt::format("{}: shape {} does not match {}", op, shape_string(a.shape),
                                     shape_string(b.shape)));
  }
}

void require_rank2(const char* op, const Tensor& a) {
  if (a.rank() != 2) {
    throw DimensionError(fmt::format("{}: expected a matrix, got {}", op, shape_string(a.shape)));
  }
}

}  // namespace

Var add(Var a, Var b) {
  auto& tape = tape_of(a);
  const auto& x = a.value();
  const auto& y = b.value();
  require_same_shape("add", x, y);
  Tensor out = x;
  out.grad.reset();
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += y.data[i];
  return tape.record(std::move(out), {a, b}, [ia = a.id, ib = b.id](Tape& t, std::size_t self) {
    const auto& g = t.node_grad(self);
    for (auto id : {ia, ib}) {
      if (!t.requires_grad(id)) continue;
      auto& dst = t.grad_buffer(id);
      for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
    }
  });
}

Var multiply(Var a, Var b) {
  auto& tape = tape_of(a);
  const auto& x = a.value();
  const auto& y = b.value();
  require_same_shape("multiply", x, y);
  Tensor out = Tensor::zeros(x.shape);
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = x.data[i] * y.data[i];
  return tape.record(std::move(out), {a, b}, [ia = a.id, ib = b.id](Tape& t, std::size_t self) {
    const auto& g = t.node_grad(self);
    const auto& xa = t.value(ia).data;
    const auto& xb = t.value(ib).data;
    if (t.requires_grad(ia)) {
      auto& dst = t.grad_buffer(ia);
      for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i] * xb[i];
    }
    if (t.requires_grad(ib)) {
      auto& dst = t.grad_buffer(ib);
      for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i] * xa[i];
    }
  });
}

Var scale(Var a, double factor) {
  auto& tape = tape_of(a);
  Tensor out = Tensor::zeros(a.shape());
  const auto& x = a.value().data;
  for (std::size_t i = 0; i < x.size(); ++i) out.data[i] = x[i] * factor;
  return tape.record(std::move(out), {a}, [ia = a.id, factor](Tape& t, std::size_t self) {
    const auto& g = t.node_grad(self);
    auto& dst = t.grad_buffer(ia);
    for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i] * factor;
  });
}

Var sum(Var a) {
  auto& tape = tape_of(a);
  double total = 0.0;
  for (double v : a.value().data) total += v;
  return tape.record(Tensor({1}, {total}), {a}, [ia = a.id](Tape& t, std::size_t self) {
    const double g = t.node_grad(self)[0];
    for (auto& d : t.grad_buffer(ia)) d += g;
  });
}

Var matmul(Var a, Var b) {
  auto& tape = tape_of(a);
  const auto& x = a.value();
  const auto& y = b.value();
  require_rank2("matmul", x);
  require_rank2("matmul", y);
  const std::size_t m = x.shape[0], k = x.shape[1], n = y.shape[1];
  if (y.shape[0] != k) {
    throw DimensionError(fmt::format("matmul: inner dimensions disagree for {} x {}",
                                     shape_string(x.shape), shape_string(y.shape)));
  }
  Tensor out = Tensor::zeros({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    double* row = &out.data[i * n];
    for (std::size_t p = 0; p < k; ++p) {
      const double xv = x.data[i * k + p];
      const double* yrow = &y.data[p * n];
      for (std::size_t j = 0; j < n; ++j) row[j] += xv * yrow[j];
    }
  }
  return tape.record(std::move(out), {a, b},
                     [ia = a.id, ib = b.id, m, k, n](Tape& t, std::size_t self) {
                       const auto& g = t.node_grad(self);
                       const auto& xa = t.value(ia).data;
                       const auto& yb = t.value(ib).data;
                       if (t.requires_grad(ia)) {
                         auto& ga = t.grad_buffer(ia);
                         for (std::size_t i = 0; i < m; ++i) {
                           for (std::size_t p = 0; p < k; ++p) {
                             double acc = 0.0;
                             for (std::size_t j = 0; j < n; ++j) acc += g[i * n + j] * yb[p * n + j];
                             ga[i * k + p] += acc;
                           }
                         }
                       }
                       if (t.requires_grad(ib)) {
                         auto& gb = t.grad_buffer(ib);
                         for (std::size_t i = 0; i < m; ++i) {
                           for (std::size_t p = 0; p < k; ++p) {
                             const double xv = xa[i * k + p];
                             double* dst = &gb[p * n];
                             const double* grow = &g[i * n];
                             for (std::size_t j = 0; j < n; ++j) dst[j] += xv * grow[j];
                           }
                         }
                       }
                     });
}

Var transpose(Var a) {
  auto& tape = tape_of(a);
  const auto& x = a.value();
  require_rank2("transpose", x);
  const std::size_t m = x.shape[0], n = x.shape[1];
  Tensor out = Tensor::zeros({n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out.data[j * m + i] = x.data[i * n + j];
  return tape.record(std::move(out), {a}, [ia = a.id, m, n](Tape& t, std::size_t self) {
    const auto& g = t.node_grad(self);
    auto& dst = t.grad_buffer(ia);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) dst[i * n + j] += g[j * m + i];
  });
}

Var reshape(Var a, Shape shape) {
  auto& tape = tape_of(a);
  const auto& x = a.value();
  if (shape_size(shape) != x.size()) {
    throw DimensionError(fmt::format("reshape: cannot view {} as {}", shape_string(x.shape),
                                     shape_string(shape)));
  }
  Tensor out(std::move(shape), x.data);
  return tape.record(std::move(out), {a}, [ia = a.id](Tape& t, std::size_t self) {
    const auto& g = t.node_grad(self);
    auto& dst = t.grad_buffer(ia);
    for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
  });
}

Var silu(Var a) {
  auto& tape = tape_of(a);
  const auto& x = a.value();
  Tensor out = Tensor::zeros(x.shape);
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double s = 1.0 / (1.0 + std::exp(-x.data[i]));
    out.data[i] = x.data[i] * s;
  }
  return tape.record(std::move(out), {a}, [ia = a.id](Tape& t, std::size_t self) {
    const auto& g = t.node_grad(self);
    const auto& xv = t.value(ia).data;
    auto& dst = t.grad_buffer(ia);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double s = 1.0 / (1.0 + std::exp(-xv[i]));
      dst[i] += g[i] * s * (1.0 + xv[i] * (1.0 - s));
    }
  });
}

Var embedding_lookup(Var table, std::span<const std::uint32_t> ids) {
  auto& tape = tape_of(table);
  const auto& w = table.value();
  require_rank2("embedding_lookup", w);
  if (ids.empty()) throw DimensionError("embedding_lookup: empty id sequence");
  const std::size_t vocab = w.shape[0], d = w.shape[1];
  Tensor out = Tensor::zeros({ids.size(), d});
  for (std::size_t t = 0; t < ids.size(); ++t) {
    if (ids[t] >= vocab) {
      throw IndexError(fmt::format("token id {} at position {} is outside vocabulary of {}", ids[t],
                                   t, vocab));
    }
    std::copy_n(&w.data[ids[t] * d], d, &out.data[t * d]);
  }
  std::vector<std::uint32_t> rows(ids.begin(), ids.end());
  return tape.record(std::move(out), {table},
                     [ia = table.id, rows = std::move(rows), d](Tape& t, std::size_t self) {
                       const auto& g = t.node_grad(self);
                       auto& dst = t.grad_buffer(ia);
                       for (std::size_t r = 0; r < rows.size(); ++r)
                         for (std::size_t c = 0; c < d; ++c) dst[rows[r] * d + c] += g[r * d + c];
                     });
}

Var rms_norm(Var x, Var gain, double eps) {
  auto& tape = tape_of(x);
  const auto& xv = x.value();
  const auto& gv = gain.value();
  require_rank2("rms_norm", xv);
  const std::size_t rows = xv.shape[0], d = xv.shape[1];
  if (gv.shape != Shape{d}) {
    throw DimensionError(fmt::format("rms_norm: gain {} does not match input {}",
                                     shape_string(gv.shape), shape_string(xv.shape)));
  }
  Tensor out = Tensor::zeros(xv.shape);
  std::vector<double> inv_rms(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double ms = 0.0;
    for (std::size_t c = 0; c < d; ++c) ms += xv.data[r * d + c] * xv.data[r * d + c];
    inv_rms[r] = 1.0 / std::sqrt(ms / static_cast<double>(d) + eps);
    for (std::size_t c = 0; c < d; ++c)
      out.data[r * d + c] = xv.data[r * d + c] * inv_rms[r] * gv.data[c];
  }
  return tape.record(
      std::move(out), {x, gain},
      [ix = x.id, ig = gain.id, rows, d, inv_rms = std::move(inv_rms)](Tape& t, std::size_t self) {
        const auto& g = t.node_grad(self);
        const auto& xd = t.value(ix).data;
        const auto& gd = t.value(ig).data;
        const bool want_x = t.requires_grad(ix);
        const bool want_g = t.requires_grad(ig);
        for (std::size_t r = 0; r < rows; ++r) {
          const double s = inv_rms[r];
          if (want_g) {
            auto& dg = t.grad_buffer(ig);
            for (std::size_t c = 0; c < d; ++c) dg[c] += g[r * d + c] * xd[r * d + c] * s;
          }
          if (want_x) {
            // dx = s * (gy - xhat * mean(gy * xhat)), gy = dy * gain
            double dot = 0.0;
            for (std::size_t c = 0; c < d; ++c) dot += g[r * d + c] * gd[c] * xd[r * d + c] * s;
            dot /= static_cast<double>(d);
            auto& dx = t.grad_buffer(ix);
            for (std::size_t c = 0; c < d; ++c) {
              dx[r * d + c] += s * (g[r * d + c] * gd[c] - xd[r * d + c] * s * dot);
            }
          }
        }
      });
}

namespace {

struct RotaryTable {
  std::vector<double> cos, sin;  // [T x head_dim/2]
};

RotaryTable rotary_table(std::size_t seq, std::size_t head_dim, double base, std::size_t offset) {
  const std::size_t half = head_dim / 2;
  RotaryTable tab{std::vector<double>(seq * half), std::vector<double>(seq * half)};
  for (std::size_t i = 0; i < half; ++i) {
    const double freq =
        std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(head_dim));
    for (std::size_t t = 0; t < seq; ++t) {
      const double angle = static_cast<double>(t + offset) * freq;
      tab.cos[t * half + i] = std::cos(angle);
      tab.sin[t * half + i] = std::sin(angle);
    }
  }
  return tab;
}

}  // namespace

Var rotary_position_encode(Var x, std::size_t n_heads, double base, std::size_t position_offset) {
  auto& tape = tape_of(x);
  const auto& xv = x.value();
  require_rank2("rotary_position_encode", xv);
  const std::size_t seq = xv.shape[0], d = xv.shape[1];
  if (n_heads == 0 || d % n_heads != 0 || (d / n_heads) % 2 != 0) {
    throw DimensionError(fmt::format("rotary_position_encode: width {} cannot split into {} heads "
                                     "of even size",
                                     d, n_heads));
  }
  const std::size_t head_dim = d / n_heads, half = head_dim / 2;
  auto tab = rotary_table(seq, head_dim, base, position_offset);
  Tensor out = Tensor::zeros(xv.shape);
  for (std::size_t t = 0; t < seq; ++t) {
    for (std::size_t h = 0; h < n_heads; ++h) {
      for (std::size_t i = 0; i < half; ++i) {
        const std::size_t c = t * d + h * head_dim + 2 * i;
        const double cs = tab.cos[t * half + i], sn = tab.sin[t * half + i];
        out.data[c] = xv.data[c] * cs - xv.data[c + 1] * sn;
        out.data[c + 1] = xv.data[c] * sn + xv.data[c + 1] * cs;
      }
    }
  }
  return tape.record(std::move(out), {x},
                     [ix = x.id, seq, d, n_heads, head_dim, half, tab = std::move(tab)](
                         Tape& t, std::size_t self) {
                       const auto& g = t.node_grad(self);
                       auto& dx = t.grad_buffer(ix);
                       for (std::size_t p = 0; p < seq; ++p) {
                         for (std::size_t h = 0; h < n_heads; ++h) {
                           for (std::size_t i = 0; i < half; ++i) {
                             const std::size_t c = p * d + h * head_dim + 2 * i;
                             const double cs = tab.cos[p * half + i], sn = tab.sin[p * half + i];
                             dx[c] += g[c] * cs + g[c + 1] * sn;
                             dx[c + 1] += -g[c] * sn + g[c + 1] * cs;
                           }
                         }
                       }
                     });
}

Var causal_attention_scores(Var q, Var k, std::size_t n_heads) {
  auto& tape = tape_of(q);
  const auto& qv = q.value();
  const auto& kv = k.value();
  require_rank2("causal_attention_scores", qv);
  require_same_shape("causal_attention_scores", qv, kv);
  const std::size_t seq = qv.shape[0], d = qv.shape[1];
  if (n_heads == 0 || d % n_heads != 0) {
    throw DimensionError(
        fmt::format("causal_attention_scores: width {} not divisible by {} heads", d, n_heads));
  }
  const std::size_t hd = d / n_heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));
  Tensor out = Tensor::zeros({n_heads * seq, seq});
  for (std::size_t h = 0; h < n_heads; ++h) {
    for (std::size_t t = 0; t < seq; ++t) {
      double* row = &out.data[(h * seq + t) * seq];
      double mx = -INFINITY;
      for (std::size_t j = 0; j <= t; ++j) {
        double dot = 0.0;
        for (std::size_t c = 0; c < hd; ++c)
          dot += qv.data[t * d + h * hd + c] * kv.data[j * d + h * hd + c];
        row[j] = dot * inv_sqrt;
        mx = std::max(mx, row[j]);
      }
      double z = 0.0;
      for (std::size_t j = 0; j <= t; ++j) {
        row[j] = std::exp(row[j] - mx);
        z += row[j];
      }
      for (std::size_t j = 0; j <= t; ++j) row[j] /= z;
    }
  }
  return tape.record(
      std::move(out), {q, k},
      [iq = q.id, ik = k.id, seq, d, n_heads, hd, inv_sqrt](Tape& t, std::size_t self) {
        const auto& g = t.node_grad(self);
        const auto& p = t.value(self).data;
        const auto& qd = t.value(iq).data;
        const auto& kd = t.value(ik).data;
        const bool want_q = t.requires_grad(iq);
        const bool want_k = t.requires_grad(ik);
        std::vector<double> ds(seq);
        for (std::size_t h = 0; h < n_heads; ++h) {
          for (std::size_t r = 0; r < seq; ++r) {
            const std::size_t base = (h * seq + r) * seq;
            double dot = 0.0;
            for (std::size_t j = 0; j <= r; ++j) dot += p[base + j] * g[base + j];
            for (std::size_t j = 0; j <= r; ++j) ds[j] = p[base + j] * (g[base + j] - dot) * inv_sqrt;
            if (want_q) {
              auto& dq = t.grad_buffer(iq);
              for (std::size_t j = 0; j <= r; ++j)
                for (std::size_t c = 0; c < hd; ++c)
                  dq[r * d + h * hd + c] += ds[j] * kd[j * d + h * hd + c];
            }
            if (want_k) {
              auto& dk = t.grad_buffer(ik);
              for (std::size_t j = 0; j <= r; ++j)
                for (std::size_t c = 0; c < hd; ++c)
                  dk[j * d + h * hd + c] += ds[j] * qd[r * d + h * hd + c];
            }
          }
        }
      });
}

Var attention_combine(Var scores, Var v, std::size_t n_heads) {
  auto& tape = tape_of(scores);
  const auto& pv = scores.value();
  const auto& vv = v.value();
  require_rank2("attention_combine", pv);
  require_rank2("attention_combine", vv);
  const std::size_t seq = vv.shape[0], d = vv.shape[1];
  if (n_heads == 0 || d % n_heads != 0 || pv.shape != Shape{n_heads * seq, seq}) {
    throw DimensionError(fmt::format("attention_combine: scores {} incompatible with values {} "
                                     "over {} heads",
                                     shape_string(pv.shape), shape_string(vv.shape), n_heads));
  }
  const std::size_t hd = d / n_heads;
  Tensor out = Tensor::zeros({seq, d});
  for (std::size_t h = 0; h < n_heads; ++h) {
    for (std::size_t t = 0; t < seq; ++t) {
      const double* prow = &pv.data[(h * seq + t) * seq];
      for (std::size_t j = 0; j <= t; ++j) {
        for (std::size_t c = 0; c < hd; ++c)
          out.data[t * d + h * hd + c] += prow[j] * vv.data[j * d + h * hd + c];
      }
    }
  }
  return tape.record(std::move(out), {scores, v},
                     [ip = scores.id, iv = v.id, seq, d, n_heads, hd](Tape& t, std::size_t self) {
                       const auto& g = t.node_grad(self);
                       const auto& pd = t.value(ip).data;
                       const auto& vd = t.value(iv).data;
                       const bool want_p = t.requires_grad(ip);
                       const bool want_v = t.requires_grad(iv);
                       for (std::size_t h = 0; h < n_heads; ++h) {
                         for (std::size_t r = 0; r < seq; ++r) {
                           const std::size_t base = (h * seq + r) * seq;
                           for (std::size_t j = 0; j <= r; ++j) {
                             if (want_p) {
                               double acc = 0.0;
                               for (std::size_t c = 0; c < hd; ++c)
                                 acc += g[r * d + h * hd + c] * vd[j * d + h * hd + c];
                               t.grad_buffer(ip)[base + j] += acc;
                             }
                             if (want_v) {
                               auto& dv = t.grad_buffer(iv);
                               for (std::size_t c = 0; c < hd; ++c)
                                 dv[j * d + h * hd + c] += pd[base + j] * g[r * d + h * hd + c];
                             }
                           }
                         }
                       }
                     });
}

namespace {

// log-sum-exp of one row, stabilized by its maximum.
double log_sum_exp(const double* row, std::size_t n) {
  double mx = row[0];
  for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
  double z = 0.0;
  for (std::size_t j = 0; j < n; ++j) z += std::exp(row[j] - mx);
  return mx + std::log(z);
}

void check_targets(const Tensor& logits, std::span<const std::uint32_t> targets) {
  require_rank2("softmax_cross_entropy", logits);
  if (targets.size() != logits.shape[0]) {
    throw DimensionError(fmt::format("softmax_cross_entropy: {} targets for logits {}",
                                     targets.size(), shape_string(logits.shape)));
  }
  for (std::size_t i = 0; i < targets.size(); ++i) {
    if (targets[i] >= logits.shape[1]) {
      throw IndexError(fmt::format("target {} at row {} is outside {} classes", targets[i], i,
                                   logits.shape[1]));
    }
  }
}

}  // namespace

std::vector<double> target_log_likelihoods(const Tensor& logits,
                                           std::span<const std::uint32_t> targets) {
  check_targets(logits, targets);
  const std::size_t v = logits.shape[1];
  std::vector<double> out(targets.size());
  for (std::size_t i = 0; i < targets.size(); ++i) {
    const double* row = &logits.data[i * v];
    out[i] = row[targets[i]] - log_sum_exp(row, v);
  }
  return out;
}

Var softmax_cross_entropy(Var logits, std::span<const std::uint32_t> targets,
                          std::span<const double> weights) {
  auto& tape = tape_of(logits);
  const auto& lv = logits.value();
  check_targets(lv, targets);
  const std::size_t rows = lv.shape[0];
  std::vector<double> w(rows, 1.0);
  if (!weights.empty()) {
    if (weights.size() != rows) {
      throw DimensionError(fmt::format("softmax_cross_entropy: {} weights for {} rows",
                                       weights.size(), rows));
    }
    w.assign(weights.begin(), weights.end());
  }
  double total_weight = 0.0;
  for (double x : w) total_weight += x;
  if (!(total_weight > 0.0)) throw DataError("softmax_cross_entropy: total row weight is zero");

  const auto ll = target_log_likelihoods(lv, targets);
  double loss = 0.0;
  for (std::size_t i = 0; i < rows; ++i) loss -= w[i] * ll[i];
  loss /= total_weight;

  std::vector<std::uint32_t> tgt(targets.begin(), targets.end());
  return tape.record(
      Tensor({1}, {loss}), {logits},
      [il = logits.id, tgt = std::move(tgt), w = std::move(w), total_weight](Tape& t,
                                                                            std::size_t self) {
        const double g = t.node_grad(self)[0];
        const auto& lv = t.value(il);
        const std::size_t v = lv.shape[1];
        auto& dl = t.grad_buffer(il);
        for (std::size_t i = 0; i < tgt.size(); ++i) {
          if (w[i] == 0.0) continue;
          const double* row = &lv.data[i * v];
          const double lse = log_sum_exp(row, v);
          const double coef = g * w[i] / total_weight;
          for (std::size_t j = 0; j < v; ++j) dl[i * v + j] += coef * std::exp(row[j] - lse);
          dl[i * v + tgt[i]] -= coef;
        }
      });
}

}  // namespace cptlab
