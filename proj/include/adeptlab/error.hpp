#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace adeptlab {

// Base class for every error thrown by this library.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Shape mismatch between operands; the message names both shapes.
struct DimensionError : Error { using Error::Error; };

// An id or label is outside its valid range.
struct IndexError : Error { using Error::Error; };

// A sequence is empty or longer than a configured maximum.
struct LengthError : Error { using Error::Error; };

// An API precondition was violated (non-scalar backward, unfrozen
// backbone, internal identity drift, ...).
struct ContractError : Error { using Error::Error; };

// A plain bad argument that is not a shape, index or length problem.
struct ArgumentError : Error { using Error::Error; };

// A parameter budget cannot be met.
struct BudgetError : Error { using Error::Error; };

// A dataset could not be balanced within the attempt limit.
struct GenerationError : Error { using Error::Error; };

// Optimization diverged; carries the step at which it happened.
struct TrainingError : Error {
  TrainingError(const std::string& what, std::size_t at_step)
      : Error(what), step(at_step) {}
  std::size_t step;
};

// Bad CLI/file configuration; carries the offending dotted key.
struct ConfigError : Error {
  ConfigError(const std::string& what, std::string dotted_key)
      : Error(what), key(std::move(dotted_key)) {}
  std::string key;
};

}  // namespace adeptlab
