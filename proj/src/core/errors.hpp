#pragma once

#include <stdexcept>
#include <string>

namespace shlab {

// Error taxonomy. Each class maps 1:1 onto a C API status code
// (include/shlab.h) and onto a CLI exit code.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Invalid or inconsistent configuration (bad field values, unknown keys).
struct ConfigError : Error {
  using Error::Error;
};

// Filesystem problems: missing files, unwritable paths, corrupt data.
struct IoError : Error {
  using Error::Error;
};

// NaN/Inf encountered in a loss, gradient, or parameter update.
struct NumericError : Error {
  using Error::Error;
};

// Shape or length mismatches between tensors, layouts, and vectors.
struct StructureError : Error {
  using Error::Error;
};

// Argument outside an operation's mathematical domain.
struct DomainError : Error {
  using Error::Error;
};

}  // namespace shlab
