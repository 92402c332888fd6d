// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>

namespace cptlab {

/// Linear warmup from zero to `peak_rate`, then cosine annealing to
/// `final_rate` at `total_steps`.
struct ScheduleSpec {
  double peak_rate = 1.5e-4;
  double final_rate = 1.5e-5;
  std::uint64_t warmup_steps = 417;
  std::uint64_t total_steps = 41'707;

  /// Throws ConfigError unless 0 < final <= peak and warmup < total.
  void validate() const;
  bool operator==(const ScheduleSpec&) const = default;
};

/// Reference pretraining schedule: 1.5e-4 peak, 1.5e-5 final, 417 warmup
/// steps out of 41,707.
ScheduleSpec reference_schedule();

/// Learning rate at `step` in [0, total_steps]; RangeError outside.
double lr_at(const ScheduleSpec& schedule, std::uint64_t step);

}  // namespace cptlab
