#pragma once

#include <stdexcept>
#include <string>

namespace dqe {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Invalid configuration or argument values.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Mismatched lengths, dimensions or tensor shapes.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf in activations, losses or predictor outputs.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Malformed or unreadable files.
class FormatError : public Error {
 public:
  using Error::Error;
};

// Filesystem and external-process failures.
class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace dqe
