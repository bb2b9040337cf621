#pragma once

#include <stdexcept>
#include <string>

namespace higru {

// Base class for every error the library raises on purpose.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Shape or width disagreement between tensors or parameter blocks.
struct DimensionError : Error {
  using Error::Error;
};

// Attention mask with no valid positions, or valid count out of range.
struct MaskError : Error {
  using Error::Error;
};

// An operation that needs at least one time step got none.
struct EmptySequenceError : Error {
  using Error::Error;
};

// Invalid hyperparameter or option value.
struct ConfigError : Error {
  using Error::Error;
};

// Malformed corpus, scheme, or embedding input.
struct IngestError : Error {
  using Error::Error;
};

// API misuse: violated precondition that is not a shape problem.
struct ContractError : Error {
  using Error::Error;
};

// Unreadable, truncated, or inconsistent checkpoint file.
struct CheckpointError : Error {
  using Error::Error;
};

// Metric requested on data that cannot support it.
struct MetricError : Error {
  using Error::Error;
};

// Training diverged or hit a non-recoverable numeric state.
struct TrainError : Error {
  using Error::Error;
};

}  // namespace higru
