#pragma once

#include <stdexcept>
#include <string>

namespace revbifpn {

// Invalid shapes, incompatible parameters, malformed configs.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Operation called in the wrong state (e.g. backward before forward).
class StateError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Unbalanced acquire/release in the activation-memory registry.
class AccountingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Non-finite values encountered (diverged training, NaN loss).
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace revbifpn
