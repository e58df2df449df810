// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace molda {

enum class ErrorCode {
  // molgraph
  Syntax,
  UnbalancedBranch,
  UnclosedRing,
  UnknownElement,
  ValenceViolation,
  MultiFragment,
  // features / chemspace
  InsufficientData,
  WidthMismatch,
  TooFewClusters,
  // tokenizer
  EmptyCorpus,
  VocabTooSmall,
  // encoder / objectives
  ShapeMismatch,
  NoMaskedTokens,
  ZeroVector,
  EmptyDomainCorpus,
  NonFinite,
  // downstream
  TokenizationFailure,
  DegenerateData,
  ZeroVariance,
  // stats
  ZeroVarianceDifferences,
  IncompleteTable,
  // plumbing
  Io,
  Config,
  Format,
};

/// Coarse grouping used by the command line to pick an exit code.
enum class ErrorCategory { Config, Data, Numeric };

constexpr std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::Syntax: return "Syntax";
    case ErrorCode::UnbalancedBranch: return "UnbalancedBranch";
    case ErrorCode::UnclosedRing: return "UnclosedRing";
    case ErrorCode::UnknownElement: return "UnknownElement";
    case ErrorCode::ValenceViolation: return "ValenceViolation";
    case ErrorCode::MultiFragment: return "MultiFragment";
    case ErrorCode::InsufficientData: return "InsufficientData";
    case ErrorCode::WidthMismatch: return "WidthMismatch";
    case ErrorCode::TooFewClusters: return "TooFewClusters";
    case ErrorCode::EmptyCorpus: return "EmptyCorpus";
    case ErrorCode::VocabTooSmall: return "VocabTooSmall";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::NoMaskedTokens: return "NoMaskedTokens";
    case ErrorCode::ZeroVector: return "ZeroVector";
    case ErrorCode::EmptyDomainCorpus: return "EmptyDomainCorpus";
    case ErrorCode::NonFinite: return "NonFinite";
    case ErrorCode::TokenizationFailure: return "TokenizationFailure";
    case ErrorCode::DegenerateData: return "DegenerateData";
    case ErrorCode::ZeroVariance: return "ZeroVariance";
    case ErrorCode::ZeroVarianceDifferences: return "ZeroVarianceDifferences";
    case ErrorCode::IncompleteTable: return "IncompleteTable";
    case ErrorCode::Io: return "Io";
    case ErrorCode::Config: return "Config";
    case ErrorCode::Format: return "Format";
  }
  return "Unknown";
}

constexpr ErrorCategory category_of(ErrorCode code) {
  switch (code) {
    case ErrorCode::Config:
    case ErrorCode::VocabTooSmall:
    case ErrorCode::TooFewClusters:
      return ErrorCategory::Config;
    case ErrorCode::NonFinite:
    case ErrorCode::ZeroVector:
    case ErrorCode::ZeroVariance:
    case ErrorCode::ZeroVarianceDifferences:
      return ErrorCategory::Numeric;
    default:
      return ErrorCategory::Data;
  }
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(to_string(code)) + ": " + message),
        code_(code) {}

  ErrorCode code() const noexcept { return code_; }
  ErrorCategory category() const noexcept { return category_of(code_); }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& message) {
  throw Error(code, message);
}

}  // namespace molda
