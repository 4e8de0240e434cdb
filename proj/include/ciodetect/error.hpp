#pragma once

#include <stdexcept>
#include <string>

namespace ciod {

// Every failure the toolkit reports derives from Error. The category decides
// the CLI exit code: validation problems exit 1, numerical failures exit 2.
enum class ErrorCategory { kValidation, kNumerical };

class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& what, ErrorCategory category)
      : std::runtime_error(what), kind_(std::move(kind)), category_(category) {}

  const std::string& kind() const noexcept { return kind_; }
  ErrorCategory category() const noexcept { return category_; }

 private:
  std::string kind_;
  ErrorCategory category_;
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& what)
      : Error("IoError", what, ErrorCategory::kValidation) {}
};

class SchemaError : public Error {
 public:
  SchemaError(std::size_t line, const std::string& what)
      : Error("SchemaError", "line " + std::to_string(line) + ": " + what,
              ErrorCategory::kValidation),
        line_(line) {}

  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what)
      : Error("ConfigError", what, ErrorCategory::kValidation) {}
};

class SizeError : public Error {
 public:
  explicit SizeError(const std::string& what)
      : Error("SizeError", what, ErrorCategory::kValidation) {}
};

class DomainError : public Error {
 public:
  explicit DomainError(const std::string& what)
      : Error("DomainError", what, ErrorCategory::kValidation) {}
};

class NoPositivesError : public Error {
 public:
  explicit NoPositivesError(const std::string& what)
      : Error("NoPositives", what, ErrorCategory::kValidation) {}
};

class NonFiniteError : public Error {
 public:
  NonFiniteError(const std::string& what, long step = -1)
      : Error("NonFinite", step >= 0 ? what + " at step " + std::to_string(step) : what,
              ErrorCategory::kNumerical),
        step_(step) {}

  long step() const noexcept { return step_; }

 private:
  long step_;
};

}  // namespace ciod
