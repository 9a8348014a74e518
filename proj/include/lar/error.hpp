#pragma once

#include <stdexcept>
#include <string>

namespace lar {

/// Inconsistent shapes, geometry or configuration keys.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Bad input data: out-of-range token ids, NaN latents, malformed files.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// An attention mask row with no visible key, or a grouping that violates its invariants.
class InvalidMaskError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Non-finite gradients or losses, empty training targets.
class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace lar
