#pragma once

#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>

namespace cil {

/// Shape or dimension mismatch in a tensor operation or model input.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Violated call contract (backward on a consumed tape, non-scalar loss, ...).
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Invalid configuration. `field` is a dotted path such as "protocol.increment".
class ConfigError : public std::invalid_argument {
 public:
  ConfigError(std::string field, const std::string& message)
      : std::invalid_argument(field.empty() ? message : field + ": " + message),
        field_(std::move(field)) {}
  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

/// Malformed binary file. Carries the byte offset and, when known, the record index.
class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& message, std::size_t offset,
             std::optional<std::size_t> record = std::nullopt)
      : std::runtime_error(format(message, offset, record)),
        offset_(offset),
        record_(record) {}
  std::size_t offset() const noexcept { return offset_; }
  std::optional<std::size_t> record() const noexcept { return record_; }

 private:
  static std::string format(const std::string& message, std::size_t offset,
                            std::optional<std::size_t> record) {
    std::string out = message + " at byte " + std::to_string(offset);
    if (record) out += " (record " + std::to_string(*record) + ")";
    return out;
  }
  std::size_t offset_;
  std::optional<std::size_t> record_;
};

/// Numerical failure during training (NaN loss or gradient).
class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace cil
