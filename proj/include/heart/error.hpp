#pragma once

#include <chrono>
#include <cstddef>
#include <stdexcept>
#include <string>

namespace heart {

/// Root of every exception thrown by the library.
class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

class ParseError : public Error {
public:
  using Error::Error;
};

class BankInvariantError : public Error {
public:
  using Error::Error;
};

class DuplicateIdError : public Error {
public:
  using Error::Error;
};

class EmptyGroupError : public Error {
public:
  using Error::Error;
};

/// Unknown short code inside a schedule pattern. `segment` is 1-based,
/// `offset` is the byte offset inside the trimmed segment.
class InvalidEmotionCode : public Error {
public:
  InvalidEmotionCode(std::size_t segment, std::size_t offset, const std::string& token)
      : Error("invalid emotion code '" + token + "' in segment " + std::to_string(segment) +
              " at offset " + std::to_string(offset)),
        segment_(segment),
        offset_(offset),
        token_(token) {}

  [[nodiscard]] std::size_t segment() const noexcept { return segment_; }
  [[nodiscard]] std::size_t offset() const noexcept { return offset_; }
  [[nodiscard]] const std::string& token() const noexcept { return token_; }

private:
  std::size_t segment_;
  std::size_t offset_;
  std::string token_;
};

class TransportError : public Error {
public:
  using Error::Error;
};

class RateLimited : public TransportError {
public:
  RateLimited(const std::string& what, std::chrono::milliseconds retry_after)
      : TransportError(what), retry_after_(retry_after) {}

  [[nodiscard]] std::chrono::milliseconds retry_after() const noexcept { return retry_after_; }

private:
  std::chrono::milliseconds retry_after_;
};

class MalformedResponse : public Error {
public:
  using Error::Error;
};

class BudgetExceeded : public Error {
public:
  using Error::Error;
};

class ScriptMissError : public Error {
public:
  using Error::Error;
};

class ModelConfigError : public Error {
public:
  using Error::Error;
};

class EmptyCandidateError : public Error {
public:
  using Error::Error;
};

class PreconditionError : public Error {
public:
  using Error::Error;
};

/// Bad dataset record; `line` is 1-based.
class RecordError : public Error {
public:
  RecordError(std::size_t line, const std::string& what)
      : Error("line " + std::to_string(line) + ": " + what), line_(line) {}

  [[nodiscard]] std::size_t line() const noexcept { return line_; }

private:
  std::size_t line_;
};

class ConfigError : public Error {
public:
  using Error::Error;
};

class MetricError : public Error {
public:
  using Error::Error;
};

class IoError : public Error {
public:
  using Error::Error;
};

}  // namespace heart
