#pragma once

#include <stdexcept>
#include <string>

namespace vilo {

// Base for every error raised by the library. Callers that only care about
// "something went wrong in the pipeline" catch this.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ParseError : public Error {
 public:
  ParseError(std::size_t line, const std::string& field, const std::string& what)
      : Error("line " + std::to_string(line) + ", field '" + field + "': " + what), line_(line), field_(field) {}
  std::size_t line() const { return line_; }
  const std::string& field() const { return field_; }

 private:
  std::size_t line_;
  std::string field_;
};

class InvariantError : public Error {
 public:
  using Error::Error;
};

// Input geometry does not determine a solution (coincident points, zero baseline, ...).
class DegenerateError : public Error {
 public:
  using Error::Error;
};

class InsufficientDataError : public Error {
 public:
  using Error::Error;
};

// A consensus search finished but nothing cleared the configured floor.
class NoConsensusError : public Error {
 public:
  using Error::Error;
};

class UnknownMapError : public Error {
 public:
  using Error::Error;
};

}  // namespace vilo
