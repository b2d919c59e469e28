#pragma once

#include <stdexcept>
#include <string>

namespace actdiff {

// Base for all library errors. `category()` is the stable machine-readable
// tag the CLI prints next to the message.
class Error : public std::runtime_error {
 public:
  Error(std::string category, const std::string& what)
      : std::runtime_error(what), category_(std::move(category)) {}
  const std::string& category() const { return category_; }

 private:
  std::string category_;
};

class ValidationError : public Error {
 public:
  explicit ValidationError(const std::string& what) : Error("validation", what) {}
};

class DomainError : public Error {
 public:
  explicit DomainError(const std::string& what) : Error("domain", what) {}
};

class DegenerateDataError : public Error {
 public:
  explicit DegenerateDataError(const std::string& what) : Error("degenerate-data", what) {}
};

class IncompleteChunkError : public Error {
 public:
  explicit IncompleteChunkError(const std::string& what) : Error("incomplete-chunk", what) {}
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error("config", what) {}
};

class ModelContractError : public Error {
 public:
  explicit ModelContractError(const std::string& what) : Error("model-contract", what) {}
};

class CoverageError : public Error {
 public:
  explicit CoverageError(const std::string& what) : Error("coverage", what) {}
};

class TrainingDivergenceError : public Error {
 public:
  explicit TrainingDivergenceError(const std::string& what) : Error("training-divergence", what) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& what) : Error("io", what) {}
};

// Broken internal invariant. The message names the invariant so the CLI can
// surface it verbatim.
class InternalError : public Error {
 public:
  explicit InternalError(const std::string& invariant) : Error("internal", invariant) {}
};

inline void internal_check(bool ok, const char* invariant) {
  if (!ok) throw InternalError(invariant);
}

}  // namespace actdiff
