#pragma once

#include <stdexcept>
#include <string>

namespace equitab {

// Shape/rank violations in tensor ops. Messages name the offending shapes.
struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct RankError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// softmax_masked row with no admissible position.
struct DegenerateMaskError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Target rows that are not valid one-hot vectors.
struct EncodingError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct PermutationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Inconsistent or infeasible configuration (ranges, dims, files).
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Episode exceeds a model's fixed width (p > p_max, or q > q_max for the
// fixed-width baseline, which directs callers to the ECOC wrapper).
struct CapacityError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct EmptyContextError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// CSV ingestion failures (unreadable file, missing label column, a class
// present only in the test split, malformed cells).
struct IngestionError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct TrainingDivergenceError : std::runtime_error {
  TrainingDivergenceError(long step, const std::string& msg)
      : std::runtime_error(msg), step(step) {}
  long step;
};

// Exhaustive permutation work refused without an explicit override.
struct CostGuardError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct CheckpointError : std::runtime_error {
  enum class Kind {
    io,
    version_mismatch,
    corrupt_header,
    tensor_mismatch,
    truncated_payload,
  };
  CheckpointError(Kind kind, const std::string& msg)
      : std::runtime_error(msg), kind(kind) {}
  Kind kind;
};

}  // namespace equitab
