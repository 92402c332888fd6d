// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <string_view>
#include <utility>
#include <vector>

namespace cptlab {

/// xoshiro256** seeded through splitmix64.
///
/// Only integer arithmetic feeds the state, so a seed and a call sequence give
/// the same stream everywhere. `normal()` uses Box-Muller and consumes exactly
/// two uniforms per call (no cached spare), which keeps the state a plain
/// function of the number of calls.
class Rng {
 public:
  explicit Rng(std::uint64_t seed);

  std::uint64_t next_u64();
  /// Uniform double in [0, 1) with 53 random bits.
  double uniform();
  double normal();
  /// Uniform integer in [0, bound). `bound` must be positive.
  std::uint64_t below(std::uint64_t bound);

  template <typename T>
  void shuffle(std::vector<T>& items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      const auto j = static_cast<std::size_t>(below(i));
      std::swap(items[i - 1], items[j]);
    }
  }

  std::array<std::uint64_t, 4> state() const { return state_; }

 private:
  std::array<std::uint64_t, 4> state_{};
};

/// Sub-seed for a named pipeline stage: FNV-1a of the stage name mixed with
/// the run seed through splitmix64.
std::uint64_t derive_seed(std::uint64_t seed, std::string_view stage);

}  // namespace cptlab
