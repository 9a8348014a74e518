#include "lar/pipeline/dataset.hpp"

#include "lar/numerics/rng.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <thread>

namespace lar::pipeline {

namespace {

using Color = std::array<double, 3>;

Color random_color(Rng& rng) { return {rng.uniform(0.1, 0.9), rng.uniform(0.1, 0.9), rng.uniform(0.1, 0.9)}; }

void paint(Image& image, int y, int x, const Color& c) {
  for (int ch = 0; ch < 3; ++ch) image.at(ch, y, x) = c[static_cast<std::size_t>(ch)];
}

void draw_background(Image& image, Rng& rng) {
  const Color a = random_color(rng);
  const Color b = random_color(rng);
  const int n = image.height;
  switch (rng.uniform_int(3)) {
    case 0: {
      const int period = 4 + rng.uniform_int(5);
      const int dir = rng.uniform_int(3);
      for (int y = 0; y < n; ++y) {
        for (int x = 0; x < n; ++x) {
          const int t = dir == 0 ? y : dir == 1 ? x : x + y;
          paint(image, y, x, (t % period) < period / 2 ? a : b);
        }
      }
      break;
    }
    case 1: {
      const int cell = 3 + rng.uniform_int(4);
      for (int y = 0; y < n; ++y) {
        for (int x = 0; x < n; ++x) paint(image, y, x, ((y / cell) + (x / cell)) % 2 ? a : b);
      }
      break;
    }
    default: {
      for (int y = 0; y < n; ++y) {
        for (int x = 0; x < n; ++x) paint(image, y, x, a);
      }
      const int blobs = 2 + rng.uniform_int(3);
      for (int k = 0; k < blobs; ++k) {
        const double cy = rng.uniform(0.0, n);
        const double cx = rng.uniform(0.0, n);
        const double r = rng.uniform(2.0, n / 4.0);
        const Color c = random_color(rng);
        for (int y = 0; y < n; ++y) {
          for (int x = 0; x < n; ++x) {
            const double w = std::exp(-((y - cy) * (y - cy) + (x - cx) * (x - cx)) / (2.0 * r * r));
            for (int ch = 0; ch < 3; ++ch) {
              double& v = image.at(ch, y, x);
              v = (1.0 - w) * v + w * c[static_cast<std::size_t>(ch)];
            }
          }
        }
      }
    }
  }
}

bool glyph_covers(int shape, int size, int dy, int dx) {
  const double c = (size - 1) / 2.0;
  const double u = dy - c;
  const double v = dx - c;
  switch (shape) {
    case 0: return true;
    case 1: return u * u + v * v <= (size / 2.0) * (size / 2.0);
    case 2: return std::abs(u) <= size / 6.0 + 0.5 || std::abs(v) <= size / 6.0 + 0.5;
    default: return std::abs(u) + std::abs(v) <= size / 2.0;
  }
}

void draw_glyph(Image& image, const Box& box, int shape, const Color& color) {
  for (int dy = 0; dy < box.size; ++dy) {
    for (int dx = 0; dx < box.size; ++dx) {
      if (glyph_covers(shape, box.size, dy, dx)) paint(image, box.y + dy, box.x + dx, color);
    }
  }
}

void mark_box(masks::PixelMask& mask, const Box& box, int margin) {
  const int n = mask.height();
  for (int y = std::max(0, box.y - margin); y < std::min(n, box.y + box.size + margin); ++y) {
    for (int x = std::max(0, box.x - margin); x < std::min(n, box.x + box.size + margin); ++x) mask.set(y, x);
  }
}

}  // namespace

SyntheticSample make_sample(std::uint64_t seed, int index, const DataConfig& config) {
  config.validate();
  Rng rng = Rng::derive(seed, static_cast<std::uint64_t>(index));
  const int n = config.image_size;
  SyntheticSample s;
  s.condition = Image(3, n, n);
  draw_background(s.condition, rng);
  s.target = s.condition;

  const int size = config.glyph_min + rng.uniform_int(config.glyph_max - config.glyph_min + 1);
  const int shape = rng.uniform_int(4);
  const Color color = random_color(rng);
  const int lo = config.mask_margin;
  const int hi = n - size - config.mask_margin;  // inclusive
  s.source = {lo + rng.uniform_int(hi - lo + 1), lo + rng.uniform_int(hi - lo + 1), size};
  auto shifted = [&](int p) {
    const int d = rng.uniform_int(2 * config.max_shift + 1) - config.max_shift;
    return std::clamp(p + d, lo, hi);
  };
  s.pose.x = shifted(s.source.x);
  s.pose.y = shifted(s.source.y);
  s.pose.size = size;

  draw_glyph(s.condition, s.source, shape, color);
  draw_glyph(s.target, s.pose, shape, color);
  s.mask = masks::PixelMask(n, n);
  mark_box(s.mask, s.source, config.mask_margin);
  mark_box(s.mask, s.pose, config.mask_margin);

  const double cx = s.pose.x + (size - 1) / 2.0;
  const double cy = s.pose.y + (size - 1) / 2.0;
  for (int k = 0; k < config.n_landmarks; ++k) {
    double x = cx;
    double y = cy;
    if (k > 0) {
      const double angle = 2.0 * std::numbers::pi * (k - 1) / std::max(1, config.n_landmarks - 1);
      x += 0.5 * size * std::cos(angle);
      y += 0.5 * size * std::sin(angle);
    }
    s.landmarks.push_back({x / (n - 1), y / (n - 1), 1.0});
  }
  return s;
}

std::vector<SyntheticSample> gen_synthetic_dataset(std::uint64_t seed, const DataConfig& config, int threads) {
  config.validate();
  std::vector<SyntheticSample> out(static_cast<std::size_t>(config.count));
  threads = std::clamp(threads, 1, config.count);
  std::vector<std::jthread> pool;
  for (int t = 0; t < threads; ++t) {
    pool.emplace_back([&, t] {
      for (int i = t; i < config.count; i += threads) out[static_cast<std::size_t>(i)] = make_sample(seed, i, config);
    });
  }
  pool.clear();
  return out;
}

}  // namespace lar::pipeline
