#pragma once

#include "lar/numerics/tensor.hpp"

#include <cstdint>
#include <span>
#include <vector>

namespace lar {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;  ///< decoupled, scaled by lr
};

/// First/second moment buffers, one per parameter, plus the step counter.
struct AdamState {
  std::vector<std::vector<double>> first_moment;
  std::vector<std::vector<double>> second_moment;
  std::int64_t step = 0;
};

/// One bias-corrected Adam update of every parameter from its gradient buffer.
/// Parameters without a gradient buffer are treated as having zero gradient.
/// Throws TrainingError (naming parameter and element) on a non-finite gradient,
/// leaving every parameter and the state untouched.
void adam_step(std::span<Tensor> params, AdamState& state, const AdamConfig& config);

}  // namespace lar
