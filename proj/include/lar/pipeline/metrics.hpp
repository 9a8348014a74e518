#pragma once

#include "lar/error.hpp"
#include "lar/pipeline/image_io.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <limits>

namespace lar::pipeline {

template <class Scalar>
using Plane = Eigen::Array<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline constexpr int kSsimWindow = 11;
inline constexpr double kSsimSigma = 1.5;
inline constexpr double kSsimK1 = 0.01;
inline constexpr double kSsimK2 = 0.03;

template <class Derived>
typename Derived::Scalar mean_absolute_error(const Eigen::ArrayBase<Derived>& a, const Eigen::ArrayBase<Derived>& b) {
  return (a - b).abs().mean();
}

template <class Derived>
typename Derived::Scalar mean_squared_error(const Eigen::ArrayBase<Derived>& a, const Eigen::ArrayBase<Derived>& b) {
  return (a - b).square().mean();
}

/// Peak signal-to-noise ratio in dB for a unit peak; +inf for identical inputs.
template <class Derived>
typename Derived::Scalar psnr(const Eigen::ArrayBase<Derived>& a, const Eigen::ArrayBase<Derived>& b) {
  using Scalar = typename Derived::Scalar;
  const Scalar mse = mean_squared_error(a, b);
  if (mse == Scalar(0)) return std::numeric_limits<Scalar>::infinity();
  return Scalar(-10) * std::log10(mse);
}

/// Normalized size x size Gaussian weights.
template <class Scalar>
Plane<Scalar> gaussian_window(int size = kSsimWindow, Scalar sigma = Scalar(kSsimSigma)) {
  Plane<Scalar> w(size, size);
  const Scalar c = Scalar(size - 1) / 2;
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) w(y, x) = std::exp(-((y - c) * (y - c) + (x - c) * (x - c)) / (2 * sigma * sigma));
  }
  return w / w.sum();
}

/// Mean SSIM over every window position fully inside the plane, for data in
/// [0, 1]. Planes smaller than the window are rejected.
template <class Scalar>
Scalar ssim(const Plane<Scalar>& a, const Plane<Scalar>& b) {
  const int n = kSsimWindow;
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw DataError("ssim: shape mismatch");
  if (a.rows() < n || a.cols() < n) throw DataError("ssim: plane smaller than the window");
  const Plane<Scalar> w = gaussian_window<Scalar>();
  const Scalar c1 = Scalar(kSsimK1 * kSsimK1);
  const Scalar c2 = Scalar(kSsimK2 * kSsimK2);
  Scalar total = 0;
  for (Eigen::Index i = 0; i + n <= a.rows(); ++i) {
    for (Eigen::Index j = 0; j + n <= a.cols(); ++j) {
      const auto pa = a.block(i, j, n, n);
      const auto pb = b.block(i, j, n, n);
      const Scalar mu_a = (w * pa).sum();
      const Scalar mu_b = (w * pb).sum();
      const Scalar var_a = (w * pa * pa).sum() - mu_a * mu_a;
      const Scalar var_b = (w * pb * pb).sum() - mu_b * mu_b;
      const Scalar cov = (w * pa * pb).sum() - mu_a * mu_b;
      total += ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2));
    }
  }
  return total / Scalar((a.rows() - n + 1) * (a.cols() - n + 1));
}

struct ImageMetrics {
  double psnr = 0.0;
  double ssim = 0.0;
  double mae = 0.0;
};

inline Plane<double> channel_plane(const Image& image, int c) {
  return Eigen::Map<const Plane<double>>(image.values.data() + static_cast<std::size_t>(c) * image.height * image.width,
                                         image.height, image.width);
}

/// PSNR and MAE over all values; SSIM averaged over channels.
inline ImageMetrics compute_metrics(const Image& output, const Image& truth) {
  if (output.channels != truth.channels || output.height != truth.height || output.width != truth.width) {
    throw DataError("metrics: image geometry mismatch");
  }
  const Eigen::Map<const Eigen::ArrayXd> a(output.values.data(), static_cast<Eigen::Index>(output.values.size()));
  const Eigen::Map<const Eigen::ArrayXd> b(truth.values.data(), static_cast<Eigen::Index>(truth.values.size()));
  ImageMetrics m;
  m.psnr = psnr(a, b);
  m.mae = mean_absolute_error(a, b);
  for (int c = 0; c < output.channels; ++c) m.ssim += ssim(channel_plane(output, c), channel_plane(truth, c));
  m.ssim /= output.channels;
  return m;
}

}  // namespace lar::pipeline
