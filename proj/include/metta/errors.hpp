#pragma once

#include <stdexcept>
#include <string>

namespace metta {

// Operand shapes do not agree (channel counts, vector lengths, non-scalar loss).
struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Convolution / pooling / crop geometry would produce an empty or out-of-bounds result.
struct GeometryError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Argument outside its documented domain (labels, sample counts, alphas, ...).
struct ValueError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Malformed on-disk data: bad magic, unsupported version, truncation.
struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Missing or ill-typed experiment configuration.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace metta
