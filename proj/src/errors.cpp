#include "molnp/errors.hpp"

namespace molnp {

std::string_view to_string(ErrorKind kind) noexcept {
  switch (kind) {
    case ErrorKind::EmptyInput: return "EmptyInput";
    case ErrorKind::UnbalancedParenthesis: return "UnbalancedParenthesis";
    case ErrorKind::UnclosedRingBond: return "UnclosedRingBond";
    case ErrorKind::UnknownAtomToken: return "UnknownAtomToken";
    case ErrorKind::InvalidBond: return "InvalidBond";
    case ErrorKind::LengthMismatch: return "LengthMismatch";
    case ErrorKind::DimensionMismatch: return "DimensionMismatch";
    case ErrorKind::ShapeMismatch: return "ShapeMismatch";
    case ErrorKind::NonPositiveVariance: return "NonPositiveVariance";
    case ErrorKind::NonFiniteLoss: return "NonFiniteLoss";
    case ErrorKind::EmptyContext: return "EmptyContext";
    case ErrorKind::InsufficientObservations: return "InsufficientObservations";
    case ErrorKind::KTooLarge: return "KTooLarge";
    case ErrorKind::EmptyTrainingSet: return "EmptyTrainingSet";
    case ErrorKind::UnknownFunction: return "UnknownFunction";
    case ErrorKind::MalformedHeader: return "MalformedHeader";
    case ErrorKind::RaggedRow: return "RaggedRow";
    case ErrorKind::BadNumeric: return "BadNumeric";
    case ErrorKind::DuplicateMoleculeId: return "DuplicateMoleculeId";
    case ErrorKind::InsufficientPool: return "InsufficientPool";
    case ErrorKind::UnknownFunctionName: return "UnknownFunctionName";
    case ErrorKind::QedOutOfRange: return "QedOutOfRange";
    case ErrorKind::MissingQed: return "MissingQed";
    case ErrorKind::InvalidSplit: return "InvalidSplit";
    case ErrorKind::ConstantTruth: return "ConstantTruth";
    case ErrorKind::PoolExhausted: return "PoolExhausted";
    case ErrorKind::IoFailure: return "IoFailure";
    case ErrorKind::ConfigError: return "ConfigError";
    case ErrorKind::MissingCheckpoint: return "MissingCheckpoint";
    case ErrorKind::CacheInvalid: return "CacheInvalid";
  }
  return "Unknown";
}

}  // namespace molnp
