// Copyright (c) 2026 The uap Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace uap {

enum class ErrorCode {
  kShapeMismatch,
  kZeroVector,
  kNonFinite,
  kBadMagic,
  kTruncatedFile,
  kRankOutOfRange,
  kIoError,
  kDuplicateSeed,
  kPoolTooSmall,
  kImageTooSmall,
  kKTooLarge,
  kVersionMismatch,
  kConfigInvalid,
  kMissingPool,
  kBudgetViolation,
  kUnknownEncoder,
  kNonFiniteGradient,
  kInvalidArgument,
};

constexpr std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::kShapeMismatch: return "ShapeMismatch";
    case ErrorCode::kZeroVector: return "ZeroVector";
    case ErrorCode::kNonFinite: return "NonFinite";
    case ErrorCode::kBadMagic: return "BadMagic";
    case ErrorCode::kTruncatedFile: return "TruncatedFile";
    case ErrorCode::kRankOutOfRange: return "RankOutOfRange";
    case ErrorCode::kIoError: return "IoError";
    case ErrorCode::kDuplicateSeed: return "DuplicateSeed";
    case ErrorCode::kPoolTooSmall: return "PoolTooSmall";
    case ErrorCode::kImageTooSmall: return "ImageTooSmall";
    case ErrorCode::kKTooLarge: return "KTooLarge";
    case ErrorCode::kVersionMismatch: return "VersionMismatch";
    case ErrorCode::kConfigInvalid: return "ConfigInvalid";
    case ErrorCode::kMissingPool: return "MissingPool";
    case ErrorCode::kBudgetViolation: return "BudgetViolation";
    case ErrorCode::kUnknownEncoder: return "UnknownEncoder";
    case ErrorCode::kNonFiniteGradient: return "NonFiniteGradient";
    case ErrorCode::kInvalidArgument: return "InvalidArgument";
  }
  return "Unknown";
}

// Every failure in the library surfaces as an Error carrying a code that
// tests and the CLI can branch on.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& what) {
  throw Error(code, what);
}

inline void require(bool cond, ErrorCode code, const std::string& what) {
  if (!cond) fail(code, what);
}

}  // namespace uap
