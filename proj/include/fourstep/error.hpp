#pragma once

#include <stdexcept>
#include <string>

namespace fourstep {

// Base for every error the library raises. `what()` carries a human-readable
// message; callers that need to branch use the derived types.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Inputs violate a precondition (shape mismatch, bad parameter, bad value).
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

// A file could not be read or does not follow its documented layout.
class ParseError : public Error {
 public:
  using Error::Error;
};

// The problem has no solution under the given constraints.
class Infeasible : public Error {
 public:
  using Error::Error;
};

// A query addressed something that does not exist (node, zone, key).
class NotFound : public Error {
 public:
  using Error::Error;
};

// Artifacts were produced by incompatible versions or schemas.
class VersionMismatch : public Error {
 public:
  using Error::Error;
};

// Wraps an error raised inside a pipeline step with the step's name.
class StepError : public Error {
 public:
  StepError(std::string step, const std::string& message)
      : Error(step + ": " + message), step_(std::move(step)) {}
  const std::string& step() const noexcept { return step_; }

 private:
  std::string step_;
};

}  // namespace fourstep
