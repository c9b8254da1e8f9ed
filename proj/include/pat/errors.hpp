#pragma once

#include <stdexcept>
#include <string>

namespace pat {

// Bad configuration value. `field` is the dotted key path when known.
class ConfigError : public std::runtime_error {
 public:
  ConfigError(std::string field, const std::string& what)
      : std::runtime_error(field.empty() ? what : field + ": " + what), field_(std::move(field)) {}
  const std::string& field() const { return field_; }

 private:
  std::string field_;
};

// Tensor shape / layout contract violated by an input.
class ShapeError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

// A module was asked to operate on shapes it was not constructed for.
class BindingError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Calling convention misuse (wrong stage, wrong count, ...).
class ContractError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Non-finite value in a loss component. `component` names it.
class NumericError : public std::runtime_error {
 public:
  NumericError(std::string component, const std::string& what)
      : std::runtime_error(component + ": " + what), component_(std::move(component)) {}
  const std::string& component() const { return component_; }

 private:
  std::string component_;
};

// Malformed on-disk data. `offset` is the byte offset of the problem.
class DataError : public std::runtime_error {
 public:
  DataError(const std::string& what, long long offset = -1)
      : std::runtime_error(offset >= 0 ? what + " (byte offset " + std::to_string(offset) + ")" : what),
        offset_(offset) {}
  long long offset() const { return offset_; }

 private:
  long long offset_;
};

}  // namespace pat
