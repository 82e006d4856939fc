#pragma once

#include <stdexcept>
#include <string>

namespace ssd {

// Base for every framework error. The CLI maps ConfigError to exit code 2
// and everything else to exit code 1.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Shape or extent mismatch between operands.
struct DimensionError : Error {
  using Error::Error;
};

// Invalid hyperparameter or malformed experiment configuration.
struct ConfigError : Error {
  using Error::Error;
};

// A precondition of an operation was violated by the caller.
struct ContractError : Error {
  using Error::Error;
};

// Backward requested on a loss that is not connected to the recording tape.
struct GraphError : Error {
  using Error::Error;
};

// Invalid runtime data (labels out of range, NaN loss, ...).
struct DataError : Error {
  using Error::Error;
};

// Dataset files missing or malformed.
struct IngestionError : Error {
  using Error::Error;
};

// Checkpoint archive unreadable or incompatible.
struct CheckpointError : Error {
  using Error::Error;
};

}  // namespace ssd
