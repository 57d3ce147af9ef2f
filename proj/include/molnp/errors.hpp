#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <string_view>

namespace molnp {

enum class ErrorKind {
  // chem
  EmptyInput,
  UnbalancedParenthesis,
  UnclosedRingBond,
  UnknownAtomToken,
  InvalidBond,
  LengthMismatch,
  // nn / cnp
  DimensionMismatch,
  ShapeMismatch,
  NonPositiveVariance,
  NonFiniteLoss,
  EmptyContext,
  InsufficientObservations,
  // baselines
  KTooLarge,
  EmptyTrainingSet,
  UnknownFunction,
  // data
  MalformedHeader,
  RaggedRow,
  BadNumeric,
  DuplicateMoleculeId,
  InsufficientPool,
  UnknownFunctionName,
  QedOutOfRange,
  MissingQed,
  InvalidSplit,
  // experiments
  ConstantTruth,
  PoolExhausted,
  IoFailure,
  // cli
  ConfigError,
  MissingCheckpoint,
  CacheInvalid,
};

std::string_view to_string(ErrorKind kind) noexcept;

/// Base exception for every recoverable failure raised by the library.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(std::string(to_string(kind)) + ": " + message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

/// SMILES syntax error carrying the byte offset of the offending token.
class ParseError : public Error {
 public:
  ParseError(ErrorKind kind, std::size_t offset, const std::string& message)
      : Error(kind, message + " at offset " + std::to_string(offset)), offset_(offset) {}

  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

/// Table parsing error carrying a 1-based line number (0 when not tied to a line).
class DataError : public Error {
 public:
  DataError(ErrorKind kind, std::size_t line, const std::string& message)
      : Error(kind, line ? "line " + std::to_string(line) + ": " + message : message),
        line_(line) {}

  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

}  // namespace molnp
