#include "lar/numerics/adam.hpp"

#include "lar/error.hpp"

#include <cmath>
#include <utility>

namespace lar {

void adam_step(std::span<Tensor> params, AdamState& state, const AdamConfig& config) {
  if (!(config.lr > 0.0)) throw ConfigError("adam: learning rate must be positive");
  if (state.first_moment.empty()) {
    for (const Tensor& p : params) {
      state.first_moment.emplace_back(p.numel(), 0.0);
      state.second_moment.emplace_back(p.numel(), 0.0);
    }
  }
  if (state.first_moment.size() != params.size()) {
    throw ConfigError("adam: state tracks " + std::to_string(state.first_moment.size()) + " parameters, given " +
                      std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (state.first_moment[i].size() != params[i].numel()) {
      throw ConfigError("adam: moment buffer " + std::to_string(i) + " does not match parameter shape " +
                        shape_string(params[i].shape()));
    }
    if (!params[i].has_grad()) continue;
    const auto g = std::as_const(params[i]).grad();
    for (std::size_t j = 0; j < g.size(); ++j) {
      if (!std::isfinite(g[j])) {
        throw TrainingError("adam: non-finite gradient " + std::to_string(g[j]) + " in parameter " +
                            std::to_string(i) + " " + shape_string(params[i].shape()) + " at element " +
                            std::to_string(j) + " (step " + std::to_string(state.step + 1) + ")");
      }
    }
  }

  ++state.step;
  const double t = static_cast<double>(state.step);
  const double correction1 = 1.0 - std::pow(config.beta1, t);
  const double correction2 = 1.0 - std::pow(config.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i].has_grad()) continue;
    auto value = params[i].data();
    const auto g = std::as_const(params[i]).grad();
    auto& m = state.first_moment[i];
    auto& v = state.second_moment[i];
    for (std::size_t j = 0; j < value.size(); ++j) {
      m[j] = config.beta1 * m[j] + (1.0 - config.beta1) * g[j];
      v[j] = config.beta2 * v[j] + (1.0 - config.beta2) * g[j] * g[j];
      const double m_hat = m[j] / correction1;
      const double v_hat = v[j] / correction2;
      value[j] -= config.lr * (m_hat / (std::sqrt(v_hat) + config.eps) + config.weight_decay * value[j]);
    }
  }
}

}  // namespace lar
