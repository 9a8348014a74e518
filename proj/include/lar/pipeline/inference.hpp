#pragma once

#include "lar/masks/masks.hpp"
#include "lar/pipeline/image_io.hpp"
#include "lar/transformer/transformer.hpp"
#include "lar/tsvq/tsvq.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace lar::pipeline {

struct InferenceInput {
  Image reference;                                ///< image whose masked region is regenerated
  masks::PixelMask mask;
  Image condition;                                ///< guidance image
  std::vector<transformer::Landmark> points;      ///< guidance landmarks
};

struct InferenceResult {
  Image output;
  std::vector<int> tokens;  ///< completed target grid
  masks::QuantMask mq;
  Tensor zhat;              ///< encoder output of the reference
  Tensor decoder_input;     ///< latent fed to the decoder
  int steps = 0;            ///< sampling steps taken
};

/// Encode, sample the masked tokens, then decode quantized masked cells and
/// continuous unmasked cells. Throws ConfigError on a geometry mismatch.
InferenceResult run_inference(const tsvq::VqModel& vq, const transformer::LaTransformer& model,
                              const InferenceInput& input, const transformer::SamplerConfig& sampler);

/// Plain autoencoding: decoder applied to the unmasked encoding.
Image reconstruct(const tsvq::VqModel& vq, const Image& image);

struct BenchmarkRow {
  double mask_rate = 0.0;
  int full_tokens = 0;
  int local_tokens = 0;
  double full_seconds = 0.0;   ///< per image
  double local_seconds = 0.0;  ///< per image
  double speedup() const { return local_seconds > 0.0 ? full_seconds / local_seconds : 0.0; }
};

struct BenchmarkReport {
  int threads = 1;
  int repeats = 1;
  std::vector<BenchmarkRow> rows;
  std::string describe() const;
};

/// Latent mask with exactly ceil(rate * h * w) cells set, chosen by a seeded
/// shuffle.
masks::QuantMask random_latent_mask(int h, int w, double rate, std::uint64_t seed);

/// Times full autoregressive generation of every token against local
/// generation of the masked tokens only, on the calling thread.
BenchmarkReport benchmark(const transformer::LaTransformer& model, const std::vector<double>& rates,
                          std::uint64_t seed, int repeats = 1);

}  // namespace lar::pipeline
