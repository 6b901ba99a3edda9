#pragma once

#include <stdexcept>
#include <string>

namespace amalgam {

struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

/// Operand shapes do not satisfy an operation's shape rule.
struct ShapeError : Error {
  explicit ShapeError(const std::string& msg) : Error(msg) {}
};

/// Input outside an operation's mathematical domain (log of a negative, ...).
struct DomainError : Error {
  explicit DomainError(const std::string& msg) : Error(msg) {}
};

/// Non-finite value where a finite one is required.
struct DivergenceError : Error {
  explicit DivergenceError(const std::string& msg) : Error(msg) {}
};

/// Malformed file contents (checkpoint, CSV, IDX).
struct IoError : Error {
  explicit IoError(const std::string& msg) : Error(msg) {}
};

/// Invalid or inconsistent experiment configuration.
struct ConfigError : Error {
  explicit ConfigError(const std::string& msg) : Error(msg) {}
};

}  // namespace amalgam
