#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace predinet {

// Shape mismatch between operands.
struct DimensionError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Invalid model / experiment configuration.
struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// NaN or otherwise unusable numeric input.
struct NumericError : std::domain_error {
  using std::domain_error::domain_error;
};

// API misuse (non-scalar loss, missing gradients, ...).
struct UsageError : std::logic_error {
  using std::logic_error::logic_error;
};

// Bad labels or dataset contents.
struct DataError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Scene generation failure (e.g. two objects in one grid cell).
struct GenerationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Malformed file. Carries the byte offset at which decoding failed.
class FormatError : public std::runtime_error {
 public:
  FormatError(const std::string& what, std::size_t offset)
      : std::runtime_error(what + " (at byte offset " + std::to_string(offset) + ")"),
        offset_(offset) {}

  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

}  // namespace predinet
