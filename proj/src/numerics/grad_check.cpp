#include "lar/numerics/grad_check.hpp"

#include "lar/error.hpp"
#include "lar/numerics/ops.hpp"
#include "lar/numerics/rng.hpp"

#include <algorithm>
#include <cmath>
#include <utility>
#include <numeric>

namespace lar {

namespace {

std::vector<int> unravel(std::size_t flat, const Shape& shape) {
  std::vector<int> coords(shape.size());
  for (std::size_t i = shape.size(); i-- > 0;) {
    coords[i] = static_cast<int>(flat % static_cast<std::size_t>(shape[i]));
    flat /= static_cast<std::size_t>(shape[i]);
  }
  return coords;
}

}  // namespace

GradCheckReport grad_check(const DifferentiableFn& fn, std::vector<Tensor> inputs, double eps, std::uint64_t seed,
                           std::size_t max_elements) {
  if (eps < 1e-7 || eps > 1e-4) throw ConfigError("grad_check: eps must lie in [1e-7, 1e-4]");
  for (Tensor& t : inputs) t = t.detach().set_requires_grad(true);

  Tensor projection;
  auto scalar_loss = [&](const Tensor& out) {
    if (out.numel() == 1) return reshape(out, {});
    if (!projection.defined()) {
      Rng rng = Rng::derive(seed, 0x9c);
      Buffer w(out.numel());
      for (double& v : w) v = rng.uniform(-1.0, 1.0);
      projection = Tensor(out.shape(), std::move(w));
    }
    return sum(mul(out, projection));
  };

  Tensor loss = scalar_loss(fn(inputs));
  loss.backward();

  GradCheckReport report;
  Rng picker = Rng::derive(seed, 0x5e);
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    Tensor& x = inputs[k];
    const std::vector<double> analytic(std::as_const(x).grad().begin(), std::as_const(x).grad().end());
    std::vector<std::size_t> probe(x.numel());
    std::iota(probe.begin(), probe.end(), std::size_t{0});
    if (probe.size() > max_elements) {
      for (std::size_t i = 0; i < max_elements; ++i) {
        const auto j = i + static_cast<std::size_t>(picker.uniform_int(static_cast<int>(probe.size() - i)));
        std::swap(probe[i], probe[j]);
      }
      probe.resize(max_elements);
    }

    NoGradGuard no_grad;
    for (std::size_t idx : probe) {
      const double original = x.data()[idx];
      x.data()[idx] = original + eps;
      const double up = scalar_loss(fn(inputs)).item();
      x.data()[idx] = original - eps;
      const double down = scalar_loss(fn(inputs)).item();
      x.data()[idx] = original;

      const double numeric = (up - down) / (2.0 * eps);
      const double a = analytic[idx];
      const double denom = std::max({std::abs(a), std::abs(numeric), kGradCheckFloor});
      const double rel = std::abs(a - numeric) / denom;
      ++report.elements_checked;
      if (rel > report.max_rel_error || !std::isfinite(rel)) {
        report.max_rel_error = std::isfinite(rel) ? rel : INFINITY;
        report.worst_input = k;
        report.worst_coords = unravel(idx, x.shape());
        report.worst_analytic = a;
        report.worst_numeric = numeric;
      }
    }
  }
  return report;
}

}  // namespace lar
