// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace lslm {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes do not conform to what an operation requires.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Malformed or inconsistent configuration (CLI exit code 2).
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// A training stage was requested before its prerequisite (CLI exit code 3).
class StageOrderError : public Error {
 public:
  using Error::Error;
};

/// Non-finite loss or other numerical breakdown (CLI exit code 4).
class NumericError : public Error {
 public:
  using Error::Error;
};

/// A file on disk does not match the expected format or digest.
class FormatError : public Error {
 public:
  using Error::Error;
};

}  // namespace lslm
