// Error taxonomy shared by all modules.
#pragma once

#include <stdexcept>
#include <string>

namespace mole {

/// Base class for every error raised by this library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Shape disagreement between tensors; message names both shapes.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// NaN or Inf reached an op that requires finite input.
class NumericDomainError : public Error {
 public:
  using Error::Error;
};

/// Optimizer state is inconsistent (e.g. trainable tensor without gradient).
class TrainingStateError : public Error {
 public:
  using Error::Error;
};

/// Loss diverged during a training run; message carries the step index.
class TrainingFailure : public Error {
 public:
  using Error::Error;
};

/// Malformed text input; message carries a line number where available.
class ParseError : public Error {
 public:
  using Error::Error;
};

/// Structurally well-formed input that violates a domain invariant.
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// Mismatch between a model component and the structure handed to it.
class StructuralError : public Error {
 public:
  using Error::Error;
};

/// Subword/word alignment violates its contract.
class AlignmentError : public Error {
 public:
  using Error::Error;
};

/// Invalid temperature or annealing request.
class ScheduleError : public Error {
 public:
  using Error::Error;
};

/// Post-hoc analytics asked for data the artifacts do not contain.
class AnalysisError : public Error {
 public:
  using Error::Error;
};

/// Pruning requested without the inputs it needs.
class PruningError : public Error {
 public:
  using Error::Error;
};

/// Bad run configuration (schema violations, impossible settings).
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Dataset files missing, unreadable, or inconsistent with the config.
class DataError : public Error {
 public:
  using Error::Error;
};

/// Unknown vocabulary id or overlong input handed to the model.
class InputError : public Error {
 public:
  using Error::Error;
};

/// Filesystem failure while reading or writing artifacts.
class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace mole
