// SPDX-License-Identifier: Apache-2.0
#include "cptlab/schedule.hpp"

#include <fmt/format.h>

#include <cmath>
#include <numbers>

#include "cptlab/error.hpp"

namespace cptlab {

void ScheduleSpec::validate() const {
  if (!(final_rate > 0.0) || !(final_rate <= peak_rate)) {
    throw ConfigError(fmt::format("schedule: need 0 < final_rate ({}) <= peak_rate ({})",
                                  final_rate, peak_rate));
  }
  if (warmup_steps >= total_steps) {
    throw ConfigError(fmt::format("schedule: warmup_steps {} must be below total_steps {}",
                                  warmup_steps, total_steps));
  }
}

ScheduleSpec reference_schedule() { return ScheduleSpec{1.5e-4, 1.5e-5, 417, 41'707}; }

double lr_at(const ScheduleSpec& s, std::uint64_t step) {
  if (step > s.total_steps) {
    throw RangeError(fmt::format("lr_at: step {} outside [0, {}]", step, s.total_steps));
  }
  if (step == s.warmup_steps) return s.peak_rate;
  if (step < s.warmup_steps) {
    return s.peak_rate * static_cast<double>(step) / static_cast<double>(s.warmup_steps);
  }
  const double progress = static_cast<double>(step - s.warmup_steps) /
                          static_cast<double>(s.total_steps - s.warmup_steps);
  return s.final_rate +
         (s.peak_rate - s.final_rate) * (1.0 + std::cos(std::numbers::pi * progress)) / 2.0;
}

}  // namespace cptlab
