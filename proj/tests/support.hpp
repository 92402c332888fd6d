// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "cptlab/autograd.hpp"
#include "cptlab/mixer.hpp"
#include "cptlab/model.hpp"
#include "cptlab/rng.hpp"

namespace cptlab::test {

Tensor random_tensor(Shape shape, Rng& rng, double scale = 1.0);

/// sum(y * R) for a fixed random R of y's shape, so every output element
/// gets a distinct upstream gradient.
Var random_projection(Var y, std::uint64_t seed);

/// Relative error ||analytic - numeric|| / (||analytic|| + ||numeric||) of
/// the gradient of a scalar graph over all of its inputs, with central
/// differences of step h.
using Graph = std::function<Var(const std::vector<Var>&)>;
double gradient_error(const std::vector<Tensor>& inputs, const Graph& graph, double h = 1e-5);

/// Artificial language over the letters [first, last]: a fixed lexicon and
/// a first-order word chain, both drawn from `seed`.
class SyntheticLanguage {
 public:
  SyntheticLanguage(char first, char last, std::uint64_t seed, std::size_t lexicon_size = 24);
  /// Newline-terminated sentences.
  std::string sentences(std::size_t count, std::uint64_t seed) const;
  const std::vector<std::string>& lexicon() const { return lexicon_; }

 private:
  std::vector<std::string> lexicon_;
  std::vector<std::vector<std::size_t>> successors_;
};

/// Replays a fixed list of batches.
class VectorSource : public BatchSource {
 public:
  explicit VectorSource(std::vector<Batch> batches) : batches_(std::move(batches)) {}
  std::optional<Batch> next() override;

 private:
  std::vector<Batch> batches_;
  std::size_t pos_ = 0;
};

/// `count` single-language batches cut from `tokens` as consecutive windows
/// of `sequence_length`, `sequences` per batch, wrapping around.
std::vector<Batch> cyclic_batches(const std::vector<TokenId>& tokens, std::size_t count,
                                  std::size_t sequences, std::size_t sequence_length,
                                  const std::string& language = "x");

/// One token per byte.
std::vector<TokenId> byte_tokens(std::string_view text);

std::filesystem::path data_dir();
/// Fresh empty directory under the system temp dir.
std::filesystem::path scratch_dir(const std::string& name);

}  // namespace cptlab::test
