#pragma once

#include <stdexcept>
#include <string>

namespace dino {

/// Error categories double as process exit codes for the command-line tool.
enum class ErrorCategory : int {
  Internal = 1,
  Config = 2,
  Io = 3,
  Numeric = 4,
  UndefinedMetric = 5,
  Shape = 6,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorCategory category, const std::string& what)
      : std::runtime_error(what), category_(category) {}

  ErrorCategory category() const noexcept { return category_; }
  int exit_code() const noexcept { return static_cast<int>(category_); }

 private:
  ErrorCategory category_;
};

struct ShapeError : Error {
  explicit ShapeError(const std::string& what) : Error(ErrorCategory::Shape, what) {}
};

/// Misaligned parallel inputs (prediction/query counts, mask sizes).
struct AlignmentError : Error {
  explicit AlignmentError(const std::string& what) : Error(ErrorCategory::Shape, what) {}
};

struct ConfigError : Error {
  explicit ConfigError(const std::string& what) : Error(ErrorCategory::Config, what) {}
};

struct IoError : Error {
  explicit IoError(const std::string& what) : Error(ErrorCategory::Io, what) {}
};

struct ParseError : Error {
  ParseError(const std::string& what, std::size_t byte_offset)
      : Error(ErrorCategory::Io, what + " (at byte " + std::to_string(byte_offset) + ")"),
        byte_offset_(byte_offset) {}
  std::size_t byte_offset() const noexcept { return byte_offset_; }

 private:
  std::size_t byte_offset_;
};

struct InvalidCostError : Error {
  explicit InvalidCostError(const std::string& what) : Error(ErrorCategory::Numeric, what) {}
};

struct NumericError : Error {
  explicit NumericError(const std::string& what) : Error(ErrorCategory::Numeric, what) {}
};

struct UndefinedMetricError : Error {
  explicit UndefinedMetricError(const std::string& what)
      : Error(ErrorCategory::UndefinedMetric, what) {}
};

}  // namespace dino
