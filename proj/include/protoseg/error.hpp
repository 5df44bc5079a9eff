// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace protoseg {

/// Raised when a caller violates an operation precondition (shapes, ranges,
/// configuration invariants).
class ContractError : public std::invalid_argument {
 public:
  explicit ContractError(const std::string& what) : std::invalid_argument(what) {}
};

/// Failures that originate in the data pipeline rather than in caller code.
class DataError : public std::runtime_error {
 public:
  enum class Kind {
    kEmptyClass,
    kUnderPopulated,
    kLabelOutOfRange,
    kNoSamples,
    kMissingMask,
    kSizeMismatch,
    kIo,
    kFormat,
  };

  DataError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

/// Non-finite values encountered during training.
class NumericError : public std::runtime_error {
 public:
  explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};

#define PROTOSEG_REQUIRE(cond, msg)                 \
  do {                                              \
    if (!(cond)) throw ::protoseg::ContractError(msg); \
  } while (0)

}  // namespace protoseg
