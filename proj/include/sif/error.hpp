#pragma once

#include <stdexcept>
#include <string>

namespace sif {

// Base of every error this library throws on a contract violation.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class SchemaError : public Error {
 public:
  using Error::Error;
};

class DataError : public Error {
 public:
  using Error::Error;
};

// Malformed, truncated or mismatched on-disk file.
class FormatError : public Error {
 public:
  using Error::Error;
};

// A metric is undefined for the given input (e.g. AUC over one class).
class MetricError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

// Raised by a training step whose loss became non-finite. `component()` names
// the term that diverged ("bce", "vq", "align", "token").
class DivergenceError : public Error {
 public:
  DivergenceError(std::string component, double value)
      : Error("non-finite loss in component '" + component + "' (" + std::to_string(value) + ")"),
        component_(std::move(component)) {}
  const std::string& component() const { return component_; }

 private:
  std::string component_;
};

}  // namespace sif
