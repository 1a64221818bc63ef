#pragma once

#include <stdexcept>
#include <string>

namespace detox {

// Failure categories. The CLI maps these onto process exit codes.
enum class ErrorKind {
  kUsage = 1,      // bad configuration or command-line input
  kData = 2,       // malformed, missing or inconsistent data
  kNumerical = 3,  // non-finite values, divergence
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }
  int exit_code() const noexcept { return static_cast<int>(kind_); }

 private:
  ErrorKind kind_;
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error(ErrorKind::kUsage, what) {}
};

class DataError : public Error {
 public:
  explicit DataError(const std::string& what) : Error(ErrorKind::kData, what) {}
};

// Shape or index violations inside the numerical core are data errors: they
// always stem from inputs that do not conform to a model's configuration.
class DimensionError : public DataError {
 public:
  explicit DimensionError(const std::string& what) : DataError(what) {}
};

class IndexError : public DataError {
 public:
  explicit IndexError(const std::string& what) : DataError(what) {}
};

class ContextError : public DataError {
 public:
  explicit ContextError(const std::string& what) : DataError(what) {}
};

class CheckpointError : public DataError {
 public:
  explicit CheckpointError(const std::string& what) : DataError(what) {}
};

class ReportError : public DataError {
 public:
  explicit ReportError(const std::string& what) : DataError(what) {}
};

class NumericalError : public Error {
 public:
  explicit NumericalError(const std::string& what)
      : Error(ErrorKind::kNumerical, what) {}
};

}  // namespace detox
