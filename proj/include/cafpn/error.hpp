#pragma once

#include <stdexcept>
#include <string>

namespace cafpn {

// Invalid model, layer or run configuration (bad depth, incompatible widths,
// non-broadcastable operands, ...).
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Tensor extents that do not match what an operation or model expects.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Missing files, truncated archives, malformed records.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Numerical failure during training (NaN/Inf gradients).
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace cafpn
