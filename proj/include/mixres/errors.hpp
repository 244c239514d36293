#pragma once

#include <stdexcept>
#include <string>

namespace mixres {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor shapes or channel counts that do not line up.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Invalid hyperparameters, model configs, or search-space specs.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// An API called out of contract (non-scalar loss, missing gradient, ...).
class UsageError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

/// Malformed dataset file contents.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Data that cannot be normalized (zero variance) or is empty.
class DegenerateDataError : public Error {
 public:
  using Error::Error;
};

class ValidationError : public Error {
 public:
  using Error::Error;
};

/// Unreadable, corrupted, or config-mismatched checkpoint.
class CheckpointError : public Error {
 public:
  using Error::Error;
};

/// Non-finite training loss.
class TrainingDiverged : public Error {
 public:
  using Error::Error;
};

}  // namespace mixres
