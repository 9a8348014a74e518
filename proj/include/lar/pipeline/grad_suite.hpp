#pragma once

#include "lar/numerics/grad_check.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace lar::pipeline {

struct GradCase {
  std::string name;
  GradCheckReport report;
};

/// Finite-difference checks of conv2d, matmul, softmax, both normalizations,
/// masked attention, a full transformer block and masked_nll on small random
/// double-precision inputs.
std::vector<GradCase> run_grad_suite(std::uint64_t seed, double eps = 1e-5);

}  // namespace lar::pipeline
