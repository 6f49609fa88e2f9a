#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace agentalign {

// Base class for every error raised by the library. Callers that only need
// a message can catch this; the CLI maps subclasses onto exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class TrajectoryParseError : public Error {
 public:
  enum class Kind { UnknownToken, MismatchedPair, UnterminatedStep, EmptyTrajectory };

  TrajectoryParseError(Kind kind, std::size_t offset, const std::string& detail);

  Kind kind() const noexcept { return kind_; }
  // Byte offset into the parsed text where the problem was detected.
  std::size_t offset() const noexcept { return offset_; }

 private:
  Kind kind_;
  std::size_t offset_;
};

class ValidationError : public Error {
 public:
  enum class Kind { OrderViolation, DuplicateAgentInRound };

  ValidationError(Kind kind, const std::string& reason);

  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

class PreferenceError : public Error {
 public:
  enum class Kind { InsufficientWinners, MixedQuestion, InvalidLabel, InvalidPrefix };

  PreferenceError(Kind kind, const std::string& detail);

  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

class IoFailure : public Error {
 public:
  using Error::Error;
};

// A JSONL or config record that does not match its schema. Line numbers are
// 1-based; field names the offending key.
class SchemaViolation : public Error {
 public:
  SchemaViolation(std::size_t line, const std::string& field, const std::string& detail);

  std::size_t line() const noexcept { return line_; }
  const std::string& field() const noexcept { return field_; }

 private:
  std::size_t line_;
  std::string field_;
};

// A token string that is not part of a policy vocabulary.
class UnknownTokenError : public Error {
 public:
  explicit UnknownTokenError(const std::string& token);

  const std::string& token() const noexcept { return token_; }

 private:
  std::string token_;
};

class LossError : public Error {
 public:
  enum class Kind { EmptySample, NonFiniteLoss };

  LossError(Kind kind, const std::string& detail);

  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

class DivergedTraining : public Error {
 public:
  using Error::Error;
};

class OrchestrationError : public Error {
 public:
  enum class Kind { BackendFailure, IllegalTransition, MissingBackend, WatchdogTripped };

  OrchestrationError(Kind kind, const std::string& detail);

  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

}  // namespace agentalign
