#pragma once

#include <stdexcept>
#include <string>

namespace iea {

// Root of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor extents that do not fit the operation.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Invalid hyper-parameters or model/run configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// API misuse, e.g. backward without a forward cache.
class UsageError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf encountered in gradients or loss.
class NumericError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// ---------------------------------------------------------------------------
// Dataset parsing

class ParseError : public Error {
 public:
  using Error::Error;
};

class BadMagicError : public ParseError {
 public:
  using ParseError::ParseError;
};

class TruncatedDataError : public ParseError {
 public:
  using ParseError::ParseError;
};

class CountMismatchError : public ParseError {
 public:
  using ParseError::ParseError;
};

class ColumnCountError : public ParseError {
 public:
  using ParseError::ParseError;
};

class TokenError : public ParseError {
 public:
  using ParseError::ParseError;
};

// ---------------------------------------------------------------------------
// Checkpoints

class CheckpointError : public Error {
 public:
  using Error::Error;
};

class CheckpointVersionError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

class CheckpointTruncatedError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

class CheckpointShapeError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

// Checkpoints that cannot be combined (different class count or input shape).
class IncompatibleModelsError : public Error {
 public:
  using Error::Error;
};

}  // namespace iea
