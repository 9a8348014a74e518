#pragma once

#include "lar/numerics/tensor.hpp"

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

namespace lar {

using DifferentiableFn = std::function<Tensor(std::span<const Tensor>)>;

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t worst_input = 0;
  std::vector<int> worst_coords;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t elements_checked = 0;
};

/// Denominator floor of the relative error |a - n| / max(|a|, |n|, floor).
inline constexpr double kGradCheckFloor = 1e-3;

/// Compares reverse-mode gradients of `fn` with central finite differences.
///
/// Non-scalar outputs are reduced with a fixed random projection drawn from
/// `seed`. Every element of every input is probed, or a random subset of
/// `max_elements` per input when it is larger.
GradCheckReport grad_check(const DifferentiableFn& fn, std::vector<Tensor> inputs, double eps = 1e-5,
                           std::uint64_t seed = 0, std::size_t max_elements = 10000);

}  // namespace lar
