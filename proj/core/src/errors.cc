#include "hetis/errors.h"

namespace hetis {

const char* to_string(ErrorCategory category) {
  switch (category) {
    case ErrorCategory::kInvalidArgument: return "invalid-argument";
    case ErrorCategory::kNotFound:        return "not-found";
    case ErrorCategory::kParse:           return "parse-error";
    case ErrorCategory::kFitFailure:      return "fit-failure";
    case ErrorCategory::kInfeasible:      return "infeasible";
    case ErrorCategory::kInternal:        return "internal";
  }
  return "unknown";
}

}  // namespace hetis
