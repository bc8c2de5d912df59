#pragma once

#include <stdexcept>
#include <string>

namespace cmcl {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Incompatible tensor shapes; the message names the op and both shapes.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Bad configuration, malformed input file, unknown variant, etc.
class ValidationError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf produced, zero-norm vector in a cosine, divergence during training.
class NumericalError : public Error {
 public:
  using Error::Error;
};

}  // namespace cmcl
