#pragma once

#include <stdexcept>
#include <string>

namespace safeaoc {

enum class ErrorKind {
  Contract,
  IntegrationFault,
  NoSolution,
  Numeric,
  RankDeficiency,
  Config,
  LearningFault,
  ObserverFault,
  Ordering,
  EmptySet,
};

inline const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Contract: return "contract";
    case ErrorKind::IntegrationFault: return "integration-fault";
    case ErrorKind::NoSolution: return "no-solution";
    case ErrorKind::Numeric: return "numeric";
    case ErrorKind::RankDeficiency: return "rank-deficiency";
    case ErrorKind::Config: return "config";
    case ErrorKind::LearningFault: return "learning-fault";
    case ErrorKind::ObserverFault: return "observer-fault";
    case ErrorKind::Ordering: return "ordering";
    case ErrorKind::EmptySet: return "empty-set";
  }
  return "unknown";
}

/// Every failure raised by the library carries a kind so callers (the CLI in
/// particular) can map it onto an exit code without parsing messages.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

/// Raised by integrators when a right-hand side turns non-finite.
class IntegrationFault : public Error {
 public:
  IntegrationFault(const std::string& what, double time)
      : Error(ErrorKind::IntegrationFault, what + " at t=" + std::to_string(time)), time_(time) {}

  double time() const noexcept { return time_; }

 private:
  double time_;
};

}  // namespace safeaoc
