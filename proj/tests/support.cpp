// SPDX-License-Identifier: Apache-2.0
#include "support.hpp"

#include <cmath>

namespace cptlab::test {

Tensor random_tensor(Shape shape, Rng& rng, double scale) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (double& x : t.data) x = scale * rng.normal();
  return t;
}

Var random_projection(Var y, std::uint64_t seed) {
  Rng rng(seed);
  Var r = y.tape->constant(random_tensor(y.shape(), rng));
  return sum(multiply(y, r));
}

double gradient_error(const std::vector<Tensor>& inputs, const Graph& graph, double h) {
  std::vector<std::vector<double>> analytic;
  {
    Tape tape;
    std::vector<Var> vars;
    for (const auto& t : inputs) vars.push_back(tape.leaf(t, true));
    Var loss = graph(vars);
    tape.backward(loss);
    for (const auto& v : vars) analytic.push_back(tape.gradient(v).data);
  }
  auto evaluate = [&](const std::vector<Tensor>& values) {
    Tape tape(false);
    std::vector<Var> vars;
    for (const auto& t : values) vars.push_back(tape.leaf(t, false));
    return graph(vars).value().data[0];
  };
  double diff = 0.0;
  double norm_a = 0.0;
  double norm_n = 0.0;
  std::vector<Tensor> probe = inputs;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    for (std::size_t j = 0; j < inputs[i].size(); ++j) {
      const double x = inputs[i].data[j];
      probe[i].data[j] = x + h;
      const double up = evaluate(probe);
      probe[i].data[j] = x - h;
      const double down = evaluate(probe);
      probe[i].data[j] = x;
      const double numeric = (up - down) / (2 * h);
      const double a = analytic[i][j];
      diff += (a - numeric) * (a - numeric);
      norm_a += a * a;
      norm_n += numeric * numeric;
    }
  }
  const double denom = std::sqrt(norm_a) + std::sqrt(norm_n);
  return denom == 0.0 ? 0.0 : std::sqrt(diff) / denom;
}

SyntheticLanguage::SyntheticLanguage(char first, char last, std::uint64_t seed,
                                     std::size_t lexicon_size) {
  Rng rng(seed);
  const auto letters = static_cast<std::uint64_t>(last - first + 1);
  while (lexicon_.size() < lexicon_size) {
    std::string word;
    const auto len = 2 + rng.below(4);
    for (std::uint64_t i = 0; i < len; ++i) word.push_back(static_cast<char>(first + rng.below(letters)));
    bool seen = false;
    for (const auto& w : lexicon_) seen = seen || w == word;
    if (!seen) lexicon_.push_back(word);
  }
  successors_.resize(lexicon_.size());
  for (auto& next : successors_) {
    for (int i = 0; i < 2; ++i) next.push_back(static_cast<std::size_t>(rng.below(lexicon_.size())));
  }
}

std::string SyntheticLanguage::sentences(std::size_t count, std::uint64_t seed) const {
  Rng rng(seed);
  std::string out;
  for (std::size_t s = 0; s < count; ++s) {
    auto w = static_cast<std::size_t>(rng.below(lexicon_.size()));
    const auto len = 4 + rng.below(5);
    for (std::uint64_t i = 0; i < len; ++i) {
      if (i > 0) out.push_back(' ');
      out += lexicon_[w];
      w = successors_[w][rng.below(successors_[w].size())];
    }
    out.push_back('\n');
  }
  return out;
}

std::optional<Batch> VectorSource::next() {
  if (pos_ >= batches_.size()) return std::nullopt;
  return batches_[pos_++];
}

std::vector<Batch> cyclic_batches(const std::vector<TokenId>& tokens, std::size_t count,
                                  std::size_t sequences, std::size_t sequence_length,
                                  const std::string& language) {
  std::vector<Batch> out;
  std::size_t pos = 0;
  for (std::size_t b = 0; b < count; ++b) {
    Batch batch;
    batch.index = b;
    for (std::size_t s = 0; s < sequences; ++s) {
      Sequence seq{language, {}};
      for (std::size_t i = 0; i < sequence_length; ++i) seq.tokens.push_back(tokens[(pos + i) % tokens.size()]);
      pos = (pos + sequence_length) % tokens.size();
      batch.composition[language] += static_cast<std::int64_t>(sequence_length);
      batch.sequences.push_back(std::move(seq));
    }
    out.push_back(std::move(batch));
  }
  return out;
}

std::vector<TokenId> byte_tokens(std::string_view text) {
  std::vector<TokenId> out;
  for (unsigned char c : text) out.push_back(c);
  return out;
}

std::filesystem::path data_dir() { return CPTLAB_DATA_DIR; }

std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("cptlab-test-" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace cptlab::test
