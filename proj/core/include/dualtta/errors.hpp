#pragma once

#include <stdexcept>
#include <string>

namespace dualtta {

// Exception hierarchy shared by all modules. Each type maps to one failure
// class so callers (and the CLI exit-code mapping) can distinguish them.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Tensor shapes do not conform to an operation's contract.
struct ShapeError : Error {
  using Error::Error;
};

// An operation produced a non-finite value, or inputs were numerically unusable.
struct NumericError : Error {
  using Error::Error;
};

// An API precondition was violated (non-scalar loss, consumed tape, ...).
struct ContractError : Error {
  using Error::Error;
};

// Invalid configuration: unknown method name, bad threshold, empty group, ...
struct ConfigError : Error {
  using Error::Error;
};

// File I/O and serialization failures (malformed checkpoint, unwritable path).
struct IoError : Error {
  using Error::Error;
};

}  // namespace dualtta
