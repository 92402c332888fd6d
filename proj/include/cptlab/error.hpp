// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace cptlab {

/// Base of every error the library raises. `kind()` is a stable class name
/// that the command line prints as the machine-parsable part of a failure.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& message)
      : std::runtime_error(message), kind_(std::move(kind)) {}

  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

#define CPTLAB_DEFINE_ERROR(Name)                                   \
  class Name : public Error {                                       \
   public:                                                          \
    explicit Name(const std::string& message) : Error(#Name, message) {} \
  }

CPTLAB_DEFINE_ERROR(DimensionError);
CPTLAB_DEFINE_ERROR(IndexError);
CPTLAB_DEFINE_ERROR(StateError);
CPTLAB_DEFINE_ERROR(LengthError);
CPTLAB_DEFINE_ERROR(RangeError);
CPTLAB_DEFINE_ERROR(ConfigError);
CPTLAB_DEFINE_ERROR(DataError);
CPTLAB_DEFINE_ERROR(PlanError);
CPTLAB_DEFINE_ERROR(DerivationError);
CPTLAB_DEFINE_ERROR(CurriculumError);
CPTLAB_DEFINE_ERROR(TrainingError);
CPTLAB_DEFINE_ERROR(FormatError);
CPTLAB_DEFINE_ERROR(IoError);

#undef CPTLAB_DEFINE_ERROR

}  // namespace cptlab
