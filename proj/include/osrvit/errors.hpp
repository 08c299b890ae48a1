#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace osrvit {

/// Tensor shapes that do not fit an operation.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Misuse of an API contract (non-scalar loss, second backward, bad label).
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Invalid configuration values or unknown protocol names.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Violations of the experimental protocol (empty class, K mismatch, ...).
class ProtocolError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A training stage aborted; the message names the stage.
class StageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed or truncated binary input. Carries the byte offset where
/// decoding stopped.
class FormatError : public std::runtime_error {
 public:
  FormatError(const std::string& what, std::size_t offset)
      : std::runtime_error(what + " (at byte offset " + std::to_string(offset) + ")"),
        message_(what),
        offset_(offset) {}

  std::size_t offset() const noexcept { return offset_; }
  const std::string& message() const noexcept { return message_; }

 private:
  std::string message_;
  std::size_t offset_;
};

}  // namespace osrvit
