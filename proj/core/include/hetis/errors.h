#pragma once

#include <stdexcept>
#include <string>

namespace hetis {

// Broad error categories. The CLI maps each one to a distinct exit code.
enum class ErrorCategory {
  kInvalidArgument,
  kNotFound,
  kParse,
  kFitFailure,
  kInfeasible,
  kInternal,
};

const char* to_string(ErrorCategory category);

class Error : public std::runtime_error {
 public:
  Error(ErrorCategory category, const std::string& what)
      : std::runtime_error(what), category_(category) {}

  ErrorCategory category() const noexcept { return category_; }

 private:
  ErrorCategory category_;
};

class InvalidArgument : public Error {
 public:
  explicit InvalidArgument(const std::string& what)
      : Error(ErrorCategory::kInvalidArgument, what) {}
};

class NotFound : public Error {
 public:
  explicit NotFound(const std::string& what) : Error(ErrorCategory::kNotFound, what) {}
};

class ParseError : public Error {
 public:
  explicit ParseError(const std::string& what) : Error(ErrorCategory::kParse, what) {}
};

class FitFailure : public Error {
 public:
  explicit FitFailure(const std::string& what) : Error(ErrorCategory::kFitFailure, what) {}
};

// Raised when a placement, plan, or dispatch cannot satisfy its capacity
// constraints. `shortfall` carries the missing amount in the caller's units
// (bytes, head-token units, blocks) when one is meaningful.
class Infeasible : public Error {
 public:
  explicit Infeasible(const std::string& what, double shortfall = 0.0)
      : Error(ErrorCategory::kInfeasible, what), shortfall_(shortfall) {}

  double shortfall() const noexcept { return shortfall_; }

 private:
  double shortfall_;
};

// A broken internal invariant: a bug, never a user error.
class InternalError : public Error {
 public:
  explicit InternalError(const std::string& what) : Error(ErrorCategory::kInternal, what) {}
};

}  // namespace hetis
