#include "agentalign/errors.hpp"

namespace agentalign {

namespace {

const char* parse_kind_name(TrajectoryParseError::Kind kind) {
  switch (kind) {
    case TrajectoryParseError::Kind::UnknownToken: return "UnknownToken";
    case TrajectoryParseError::Kind::MismatchedPair: return "MismatchedPair";
    case TrajectoryParseError::Kind::UnterminatedStep: return "UnterminatedStep";
    case TrajectoryParseError::Kind::EmptyTrajectory: return "EmptyTrajectory";
  }
  return "ParseError";
}

const char* validation_kind_name(ValidationError::Kind kind) {
  return kind == ValidationError::Kind::OrderViolation ? "OrderViolation" : "DuplicateAgentInRound";
}

const char* preference_kind_name(PreferenceError::Kind kind) {
  switch (kind) {
    case PreferenceError::Kind::InsufficientWinners: return "InsufficientWinners";
    case PreferenceError::Kind::MixedQuestion: return "MixedQuestion";
    case PreferenceError::Kind::InvalidLabel: return "InvalidLabel";
    case PreferenceError::Kind::InvalidPrefix: return "InvalidPrefix";
  }
  return "PreferenceError";
}

const char* orchestration_kind_name(OrchestrationError::Kind kind) {
  switch (kind) {
    case OrchestrationError::Kind::BackendFailure: return "BackendFailure";
    case OrchestrationError::Kind::IllegalTransition: return "IllegalTransition";
    case OrchestrationError::Kind::MissingBackend: return "MissingBackend";
    case OrchestrationError::Kind::WatchdogTripped: return "WatchdogTripped";
  }
  return "OrchestrationError";
}

}  // namespace

TrajectoryParseError::TrajectoryParseError(Kind kind, std::size_t offset, const std::string& detail)
    : Error(std::string(parse_kind_name(kind)) + " at byte " + std::to_string(offset) + ": " + detail),
      kind_(kind),
      offset_(offset) {}

ValidationError::ValidationError(Kind kind, const std::string& reason)
    : Error(std::string(validation_kind_name(kind)) + ": " + reason), kind_(kind) {}

PreferenceError::PreferenceError(Kind kind, const std::string& detail)
    : Error(std::string(preference_kind_name(kind)) + ": " + detail), kind_(kind) {}

SchemaViolation::SchemaViolation(std::size_t line, const std::string& field, const std::string& detail)
    : Error("SchemaViolation at line " + std::to_string(line) + ", field '" + field + "': " + detail),
      line_(line),
      field_(field) {}

UnknownTokenError::UnknownTokenError(const std::string& token)
    : Error("UnknownToken: '" + token + "' is not in the vocabulary"), token_(token) {}

LossError::LossError(Kind kind, const std::string& detail)
    : Error(std::string(kind == Kind::EmptySample ? "EmptySample" : "NonFiniteLoss") + ": " + detail),
      kind_(kind) {}

OrchestrationError::OrchestrationError(Kind kind, const std::string& detail)
    : Error(std::string(orchestration_kind_name(kind)) + ": " + detail), kind_(kind) {}

}  // namespace agentalign
