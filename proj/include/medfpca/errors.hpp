#pragma once

#include <stdexcept>
#include <string>

namespace medfpca {

// Base class for all library errors.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Malformed input schema (missing column, unknown config key, ...).
class SchemaError : public Error {
 public:
  using Error::Error;
};

// Data that parses but violates an invariant (bad treatment value, duplicate
// time stamps, empty arm, ...).
class ValidationError : public Error {
 public:
  using Error::Error;
};

// Argument outside its mathematical domain.
class DomainError : public Error {
 public:
  using Error::Error;
};

// Linear-algebra or sampling failure that survived jitter escalation.
class NumericalError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace medfpca
