#pragma once

#include "lar/masks/masks.hpp"
#include "lar/pipeline/config.hpp"
#include "lar/pipeline/image_io.hpp"
#include "lar/transformer/transformer.hpp"

#include <cstdint>
#include <vector>

namespace lar::pipeline {

struct Box {
  int x = 0;
  int y = 0;
  int size = 0;
};

/// A background scene with a glyph at two poses. The condition shows the
/// glyph at `source`, the target at `pose`; outside the mask they agree.
struct SyntheticSample {
  Image condition;
  Image target;
  masks::PixelMask mask;
  std::vector<transformer::Landmark> landmarks;  ///< target pose
  Box source;
  Box pose;
};

/// Pure function of (seed, index).
SyntheticSample make_sample(std::uint64_t seed, int index, const DataConfig& config);

/// Samples 0..count-1, generated on `threads` workers.
std::vector<SyntheticSample> gen_synthetic_dataset(std::uint64_t seed, const DataConfig& config, int threads = 1);

}  // namespace lar::pipeline
