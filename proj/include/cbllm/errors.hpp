#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace cbllm {

// Every failure the library reports derives from Error so callers (CLI, server)
// can map the category onto exit codes / HTTP statuses.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Caller misuse: bad arguments, wrong call order, out-of-range indices.
class UsageError : public Error {
 public:
  using Error::Error;
};

// Input data that fails a documented invariant (files, configs, labels).
class ValidationError : public Error {
 public:
  using Error::Error;
};

// Incompatible tensor shapes for an op.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// NaN or Inf produced by a forward op or a loss.
class NumericFault : public Error {
 public:
  using Error::Error;
};

// A key that is not present (embedding file lookups, unknown concepts).
class LookupError : public Error {
 public:
  using Error::Error;
};

}  // namespace cbllm
