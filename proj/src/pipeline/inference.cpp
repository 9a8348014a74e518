#include "lar/pipeline/inference.hpp"

#include "lar/error.hpp"

#include <chrono>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <sstream>

namespace lar::pipeline {

namespace {

void check_geometry(const tsvq::VqModel& vq, const transformer::LaTransformer& model, const InferenceInput& in) {
  const int n = vq.config().image_size;
  auto fits = [&](const Image& im) { return im.channels == vq.config().image_channels && im.height == n && im.width == n; };
  if (!fits(in.reference) || !fits(in.condition)) {
    throw ConfigError("inference: images must be " + std::to_string(vq.config().image_channels) + "x" +
                      std::to_string(n) + "x" + std::to_string(n));
  }
  if (in.mask.height() != n || in.mask.width() != n) throw ConfigError("inference: mask geometry does not match the image");
  const auto& tc = model.config();
  if (tc.codebook_size != vq.config().codebook_size || tc.grid_h != vq.config().latent_size() ||
      tc.grid_w != vq.config().latent_size()) {
    throw ConfigError("inference: transformer and VQ geometry disagree");
  }
  if (static_cast<int>(in.points.size()) != tc.n_points) {
    throw ConfigError("inference: expected " + std::to_string(tc.n_points) + " landmarks, got " +
                      std::to_string(in.points.size()));
  }
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace

InferenceResult run_inference(const tsvq::VqModel& vq, const transformer::LaTransformer& model,
                              const InferenceInput& input, const transformer::SamplerConfig& sampler) {
  check_geometry(vq, model, input);
  NoGradGuard no_grad;
  InferenceResult result;
  const tsvq::LatentGrid ref = vq.encode_quantized(to_model(input.reference), input.mask);
  result.mq = vq.latent_mask(input.mask);
  result.zhat = ref.zhat;

  const masks::PixelMask empty(input.mask.height(), input.mask.width());
  transformer::SequenceInput seq{vq.encode_quantized(to_model(input.condition), empty).indices, ref.indices,
                                 input.points};
  const transformer::SampleResult sampled = transformer::sample_local(model, seq, result.mq, sampler);
  result.tokens = sampled.target_ids;
  result.steps = sampled.steps;

  const Tensor zq = vq.codebook().lookup(result.tokens, ref.h, ref.w);
  const tsvq::DecodeResult dec = tsvq::local_decode(zq, ref.zhat, result.mq, vq.decoder());
  result.decoder_input = dec.decoder_input;
  result.output = from_model(dec.image);
  return result;
}

Image reconstruct(const tsvq::VqModel& vq, const Image& image) {
  NoGradGuard no_grad;
  const masks::PixelMask empty(image.height, image.width);
  return from_model(vq.decoder().forward(vq.encode(to_model(image), empty)));
}

std::string BenchmarkReport::describe() const {
  std::ostringstream out;
  out << "threads " << threads << ", repeats " << repeats << "\n";
  out << "mask_rate  full_tokens  local_tokens  full_s/img  local_s/img  speedup\n";
  for (const BenchmarkRow& r : rows) {
    out << std::fixed << std::setprecision(4) << std::setw(9) << r.mask_rate << "  " << std::setw(11) << r.full_tokens
        << "  " << std::setw(12) << r.local_tokens << "  " << std::setw(10) << r.full_seconds << "  " << std::setw(11)
        << r.local_seconds << "  " << std::setprecision(2) << std::setw(7) << r.speedup() << "\n";
  }
  return out.str();
}

masks::QuantMask random_latent_mask(int h, int w, double rate, std::uint64_t seed) {
  if (!(rate >= 0.0 && rate <= 1.0)) throw ConfigError("mask rate must lie in [0, 1]");
  const int cells = h * w;
  // Absorb representation error so that e.g. 0.25 * 64 counts as 16.
  const int count = static_cast<int>(std::ceil(rate * cells - 1e-9));
  std::vector<int> order(static_cast<std::size_t>(cells));
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed);
  for (int i = cells - 1; i > 0; --i) std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(rng.uniform_int(i + 1))]);
  masks::QuantMask mq(h, w);
  for (int i = 0; i < count; ++i) mq.set(order[static_cast<std::size_t>(i)]);
  return mq;
}

BenchmarkReport benchmark(const transformer::LaTransformer& model, const std::vector<double>& rates, std::uint64_t seed,
                          int repeats) {
  if (repeats < 1) throw ConfigError("benchmark: repeats must be positive");
  const auto& tc = model.config();
  Rng rng = Rng::derive(seed, 0xbe4c);
  transformer::SequenceInput input;
  for (int i = 0; i < tc.n_grid(); ++i) input.cond_ids.push_back(rng.uniform_int(tc.codebook_size));
  for (int i = 0; i < tc.n_grid(); ++i) input.target_ids.push_back(rng.uniform_int(tc.codebook_size));
  for (int i = 0; i < tc.n_points; ++i) input.points.push_back({rng.uniform(), rng.uniform(), 1.0});
  transformer::SamplerConfig sampler;
  sampler.seed = seed;
  sampler.top_k = std::min(sampler.top_k, tc.codebook_size);

  // Warm-up pass.
  transformer::sample_local(model, input, random_latent_mask(tc.grid_h, tc.grid_w, 0.1, seed), sampler);

  BenchmarkReport report;
  report.repeats = repeats;
  for (std::size_t k = 0; k < rates.size(); ++k) {
    BenchmarkRow row;
    row.mask_rate = rates[k];
    const masks::QuantMask mq = random_latent_mask(tc.grid_h, tc.grid_w, rates[k], seed + k);
    auto t0 = std::chrono::steady_clock::now();
    for (int r = 0; r < repeats; ++r) row.full_tokens = transformer::sample_full(model, input, sampler).steps;
    row.full_seconds = seconds_since(t0) / repeats;
    t0 = std::chrono::steady_clock::now();
    for (int r = 0; r < repeats; ++r) row.local_tokens = transformer::sample_local(model, input, mq, sampler).steps;
    row.local_seconds = seconds_since(t0) / repeats;
    report.rows.push_back(row);
  }
  return report;
}

}  // namespace lar::pipeline
