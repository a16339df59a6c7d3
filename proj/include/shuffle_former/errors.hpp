#pragma once

#include <stdexcept>
#include <string>

namespace shuffle_former {

// Base for every error raised by the library. Each subclass maps to one
// failure category; callers that only care about "something was invalid"
// catch Error.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Extents disagree (shape-product mismatch, matmul inner dims, add operands).
class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& what) : Error("invalid shape: " + what) {}
};

// Hyper-parameters that cannot describe a valid layer or model.
class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error("invalid config: " + what) {}
};

// API used out of contract (non-scalar loss, grad/param mismatch).
class CallError : public Error {
 public:
  explicit CallError(const std::string& what) : Error("invalid call: " + what) {}
};

// Spatial extent not divisible by the window size.
class PartitionError : public Error {
 public:
  explicit PartitionError(const std::string& what) : Error("partition error: " + what) {}
};

// Train-mode batch norm with a single element per channel.
class DegenerateBatchError : public Error {
 public:
  explicit DegenerateBatchError(const std::string& what)
      : Error("degenerate batch: " + what) {}
};

// NaN/Inf detected while validation is enabled.
class NumericError : public Error {
 public:
  explicit NumericError(const std::string& what) : Error("numeric error: " + what) {}
};

class CheckpointError : public Error {
 public:
  explicit CheckpointError(const std::string& what) : Error("checkpoint error: " + what) {}
};

}  // namespace shuffle_former
