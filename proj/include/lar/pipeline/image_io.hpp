#pragma once

#include "lar/masks/masks.hpp"
#include "lar/numerics/tensor.hpp"

#include <filesystem>
#include <vector>

namespace lar::pipeline {

/// Planar image with values in [0, 1], laid out [C, H, W].
struct Image {
  int channels = 0;
  int height = 0;
  int width = 0;
  std::vector<double> values;

  Image() = default;
  Image(int c, int h, int w, double fill = 0.0)
      : channels(c), height(h), width(w), values(static_cast<std::size_t>(c) * h * w, fill) {}

  double& at(int c, int y, int x) { return values[(static_cast<std::size_t>(c) * height + y) * width + x]; }
  double at(int c, int y, int x) const { return values[(static_cast<std::size_t>(c) * height + y) * width + x]; }
  friend bool operator==(const Image&, const Image&) = default;
};

/// [0, 1] image to the model's [-1, 1] tensor.
Tensor to_model(const Image& image);
/// Model tensor back to [0, 1], clamped.
Image from_model(const Tensor& t);

/// Rounds every value to the nearest 8-bit level, as a PPM round-trip would.
Image quantize_8bit(const Image& image);

void write_ppm(const std::filesystem::path& path, const Image& image);
Image read_ppm(const std::filesystem::path& path);
/// Masked cells are written as 255.
void write_pgm(const std::filesystem::path& path, const masks::PixelMask& mask);
/// Grey levels >= 128 are masked.
masks::PixelMask read_pgm(const std::filesystem::path& path);

/// Header line "tokens H W" then H lines of W integers.
void write_token_grid(const std::filesystem::path& path, const std::vector<int>& ids, int height, int width);
std::vector<int> read_token_grid(const std::filesystem::path& path, int& height, int& width);

}  // namespace lar::pipeline
