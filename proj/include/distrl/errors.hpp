#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace distrl {

// Argument errors use std::invalid_argument, state errors std::logic_error.
// The types below cover failures that callers usually want to tell apart.

struct DecodeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct FormatError : std::runtime_error {
  FormatError(const std::string& what, std::size_t line = 0)
      : std::runtime_error(line ? "line " + std::to_string(line) + ": " + what : what), line(line) {}
  std::size_t line;
};

struct ProtocolError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct IntegrityError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct StateError : std::logic_error {
  using std::logic_error::logic_error;
};

}  // namespace distrl
