#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace covadj {

// Stable error codes. The names returned by to_string() are part of the CLI
// contract (machine-readable error JSON), so do not rename them.
enum class ErrorCode {
  InvalidArgument,
  MissingValue,
  UnknownLevel,
  ParseError,
  SchemaError,
  ArmCountBelowTwo,
  EmptyArm,
  ValidationError,
  DimensionMismatch,
  RankDeficient,
  NotConverged,
  Separation,
  DegenerateVariance,
  UnsupportedModel,
  FoldTooSmall,
  StratumWithoutArm,
  DomainError,
  AllWeightsZero,
  NotBinaryOutcome,
  NoEvents,
  StratumWithoutEvents,
  NoRoot,
  InvalidScheme,
  InvalidSpec,
  StratumHandlingRequired,
  FailureBudgetExceeded,
  IoError,
};

inline std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::MissingValue: return "MissingValue";
    case ErrorCode::UnknownLevel: return "UnknownLevel";
    case ErrorCode::ParseError: return "ParseError";
    case ErrorCode::SchemaError: return "SchemaError";
    case ErrorCode::ArmCountBelowTwo: return "ArmCountBelowTwo";
    case ErrorCode::EmptyArm: return "EmptyArm";
    case ErrorCode::ValidationError: return "ValidationError";
    case ErrorCode::DimensionMismatch: return "DimensionMismatch";
    case ErrorCode::RankDeficient: return "RankDeficient";
    case ErrorCode::NotConverged: return "NotConverged";
    case ErrorCode::Separation: return "Separation";
    case ErrorCode::DegenerateVariance: return "DegenerateVariance";
    case ErrorCode::UnsupportedModel: return "UnsupportedModel";
    case ErrorCode::FoldTooSmall: return "FoldTooSmall";
    case ErrorCode::StratumWithoutArm: return "StratumWithoutArm";
    case ErrorCode::DomainError: return "DomainError";
    case ErrorCode::AllWeightsZero: return "AllWeightsZero";
    case ErrorCode::NotBinaryOutcome: return "NotBinaryOutcome";
    case ErrorCode::NoEvents: return "NoEvents";
    case ErrorCode::StratumWithoutEvents: return "StratumWithoutEvents";
    case ErrorCode::NoRoot: return "NoRoot";
    case ErrorCode::InvalidScheme: return "InvalidScheme";
    case ErrorCode::InvalidSpec: return "InvalidSpec";
    case ErrorCode::StratumHandlingRequired: return "StratumHandlingRequired";
    case ErrorCode::FailureBudgetExceeded: return "FailureBudgetExceeded";
    case ErrorCode::IoError: return "IoError";
  }
  return "Unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& what) { throw Error(code, what); }

inline void require(bool cond, ErrorCode code, const std::string& what) {
  if (!cond) fail(code, what);
}

}  // namespace covadj
