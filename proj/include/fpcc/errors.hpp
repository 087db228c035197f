// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace fpcc {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Incompatible tensor shapes or ranks.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// NaN/Inf produced or consumed, or a guarded domain was violated.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Class label or element index outside its valid range.
class IndexError : public Error {
 public:
  using Error::Error;
};

/// API misuse, e.g. seeding a reverse pass from a non-scalar node.
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration: unknown hook sites, out-of-range hyperparameters.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Malformed input file.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Input files that parse individually but disagree with each other.
class ConsistencyError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace fpcc
