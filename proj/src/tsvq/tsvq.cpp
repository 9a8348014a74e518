#include "lar/tsvq/tsvq.hpp"

#include "lar/error.hpp"
#include "lar/numerics/ops.hpp"

#include <cmath>
#include <limits>

namespace lar::tsvq {

void VqConfig::validate() const {
  if (image_channels < 1 || image_size < 2) throw ConfigError("vq: invalid image geometry");
  if (channels.empty()) throw ConfigError("vq: at least one downsampling level is required");
  if (image_size % downsample_factor() != 0) {
    throw ConfigError("vq: image size " + std::to_string(image_size) + " not divisible by " +
                      std::to_string(downsample_factor()));
  }
  if (latent_size() < 2) throw ConfigError("vq: latent grid smaller than 2x2");
  if (codebook_size < 2) throw ConfigError("vq: codebook needs at least two entries");
  if (code_dim < 1 || res_blocks < 0) throw ConfigError("vq: invalid code_dim or res_blocks");
}

ResidualBlock::ResidualBlock(int in_channels, int out_channels, bool two_stream_, Rng& rng)
    : norm1(in_channels),
      norm2(out_channels),
      conv1(in_channels, out_channels, 3, 1, rng),
      conv2(out_channels, out_channels, 3, 1, rng),
      two_stream(two_stream_) {
  if (in_channels != out_channels) skip.emplace(in_channels, out_channels, 1, 1, rng);
}

Tensor ResidualBlock::forward(const Tensor& x, const QuantMask& mask, bool plain) const {
  const bool masked = two_stream && !plain;
  auto conv = [&](const ConvLayer& layer, const Tensor& in) {
    return masked ? two_stream_conv(in, mask, TwoStreamConvLayer(layer)) : layer.forward(in);
  };
  const QuantMask* stats_mask = masked ? &mask : nullptr;
  Tensor h = swish(norm1.forward(x, stats_mask));
  h = conv(conv1, h);
  h = swish(norm2.forward(h, stats_mask));
  h = conv(conv2, h);
  return add(skip ? skip->forward(x) : x, h);
}

void ResidualBlock::collect(ParamList& out, const std::string& prefix) const {
  norm1.collect(out, prefix + ".norm1");
  conv1.collect(out, prefix + ".conv1");
  norm2.collect(out, prefix + ".norm2");
  conv2.collect(out, prefix + ".conv2");
  if (skip) skip->collect(out, prefix + ".skip");
}

void ResidualBlock::describe(std::vector<LayerInfo>& out, const std::string& prefix) const {
  const LayerKind conv_kind = two_stream ? LayerKind::kTwoStreamConv : LayerKind::kConv;
  out.push_back({prefix + ".norm1", LayerKind::kInstanceNorm});
  out.push_back({prefix + ".conv1", conv_kind});
  out.push_back({prefix + ".norm2", LayerKind::kInstanceNorm});
  out.push_back({prefix + ".conv2", conv_kind});
  if (skip) out.push_back({prefix + ".skip", LayerKind::kConv});
}

EncoderStack::EncoderStack(const VqConfig& config, Rng& rng)
    : conv_in_(config.image_channels, config.channels.front(), 3, 1, rng) {
  int current = config.channels.front();
  for (int target : config.channels) {
    std::vector<ResidualBlock> blocks;
    for (int b = 0; b < config.res_blocks; ++b) {
      blocks.emplace_back(current, target, true, rng);
      current = target;
    }
    if (config.res_blocks == 0 && current != target) {
      blocks.emplace_back(current, target, true, rng);
      current = target;
    }
    levels_.push_back(std::move(blocks));
    down_.emplace_back(current, current, 3, 2, rng);
  }
  mid_ = ResidualBlock(current, current, true, rng);
  output_norm_ = config.output_norm;
  if (output_norm_) norm_out_ = InstanceNormLayer(current);
  conv_out_ = TwoStreamConvLayer(current, config.code_dim, 3, 1, rng);
}

Tensor EncoderStack::run(const Tensor& image, const QuantMask& mask, bool plain) const {
  auto ts = [plain](const Tensor& x, const QuantMask& m, const TwoStreamConvLayer& layer) {
    return plain ? layer.conv.forward(x) : two_stream_conv(x, m, layer);
  };
  QuantMask m = mask;
  Tensor h = ts(image, m, conv_in_);
  for (std::size_t level = 0; level < levels_.size(); ++level) {
    for (const ResidualBlock& block : levels_[level]) h = block.forward(h, m, plain);
    h = ts(h, m, down_[level]);
    m = down_[level].output_mask(m);
  }
  h = mid_.forward(h, m, plain);
  h = swish(output_norm_ ? norm_out_.forward(h, plain ? nullptr : &m) : h);
  return ts(h, m, conv_out_);
}

Tensor EncoderStack::forward(const Tensor& image, const PixelMask& mask) const {
  if (image.rank() != 3 || image.dim(1) != mask.height() || image.dim(2) != mask.width()) {
    throw ConfigError("encode: image " + shape_string(image.shape()) + " does not match mask " +
                      std::to_string(mask.height()) + "x" + std::to_string(mask.width()));
  }
  return run(image, masks::downsample_mask(mask, 1), false);
}

Tensor EncoderStack::forward_plain(const Tensor& image) const {
  if (image.rank() != 3) throw ConfigError("encode: image must be [C, H, W]");
  return run(image, QuantMask(image.dim(1), image.dim(2)), true);
}

void EncoderStack::collect(ParamList& out) const {
  conv_in_.collect(out, "encoder.conv_in");
  for (std::size_t level = 0; level < levels_.size(); ++level) {
    const std::string prefix = "encoder.level" + std::to_string(level);
    for (std::size_t b = 0; b < levels_[level].size(); ++b) levels_[level][b].collect(out, prefix + ".block" + std::to_string(b));
    down_[level].collect(out, prefix + ".down");
  }
  mid_.collect(out, "encoder.mid");
  if (output_norm_) norm_out_.collect(out, "encoder.norm_out");
  conv_out_.collect(out, "encoder.conv_out");
}

std::vector<LayerInfo> EncoderStack::describe() const {
  std::vector<LayerInfo> out{{"encoder.conv_in", LayerKind::kTwoStreamConv}};
  for (std::size_t level = 0; level < levels_.size(); ++level) {
    const std::string prefix = "encoder.level" + std::to_string(level);
    for (std::size_t b = 0; b < levels_[level].size(); ++b) levels_[level][b].describe(out, prefix + ".block" + std::to_string(b));
    out.push_back({prefix + ".down", LayerKind::kTwoStreamConv});
  }
  mid_.describe(out, "encoder.mid");
  if (output_norm_) out.push_back({"encoder.norm_out", LayerKind::kInstanceNorm});
  out.push_back({"encoder.conv_out", LayerKind::kTwoStreamConv});
  return out;
}

DecoderStack::DecoderStack(const VqConfig& config, Rng& rng)
    : conv_in_(config.code_dim, config.channels.back(), 3, 1, rng) {
  int current = config.channels.back();
  mid_ = ResidualBlock(current, current, false, rng);
  for (auto it = config.channels.rbegin(); it != config.channels.rend(); ++it) {
    const int target = *it;
    std::vector<ResidualBlock> blocks;
    for (int b = 0; b < config.res_blocks; ++b) {
      blocks.emplace_back(current, target, false, rng);
      current = target;
    }
    if (config.res_blocks == 0 && current != target) {
      blocks.emplace_back(current, target, false, rng);
      current = target;
    }
    levels_.push_back(std::move(blocks));
    up_.emplace_back(current, current, 3, 1, rng);
  }
  output_norm_ = config.output_norm;
  if (output_norm_) norm_out_ = InstanceNormLayer(current);
  conv_out_ = ConvLayer(current, config.image_channels, 3, 1, rng);
}

Tensor DecoderStack::forward(const Tensor& latent) const {
  const QuantMask none;
  Tensor h = conv_in_.forward(latent);
  h = mid_.forward(h, none);
  for (std::size_t level = 0; level < levels_.size(); ++level) {
    for (const ResidualBlock& block : levels_[level]) h = block.forward(h, none);
    h = up_[level].forward(upsample_nearest(h, 2));
  }
  h = swish(output_norm_ ? norm_out_.forward(h) : h);
  return tanh(conv_out_.forward(h));
}

void DecoderStack::collect(ParamList& out) const {
  conv_in_.collect(out, "decoder.conv_in");
  mid_.collect(out, "decoder.mid");
  for (std::size_t level = 0; level < levels_.size(); ++level) {
    const std::string prefix = "decoder.level" + std::to_string(level);
    for (std::size_t b = 0; b < levels_[level].size(); ++b) levels_[level][b].collect(out, prefix + ".block" + std::to_string(b));
    up_[level].collect(out, prefix + ".up");
  }
  if (output_norm_) norm_out_.collect(out, "decoder.norm_out");
  conv_out_.collect(out, "decoder.conv_out");
}

std::vector<LayerInfo> DecoderStack::describe() const {
  std::vector<LayerInfo> out{{"decoder.conv_in", LayerKind::kConv}};
  mid_.describe(out, "decoder.mid");
  for (std::size_t level = 0; level < levels_.size(); ++level) {
    const std::string prefix = "decoder.level" + std::to_string(level);
    for (std::size_t b = 0; b < levels_[level].size(); ++b) levels_[level][b].describe(out, prefix + ".block" + std::to_string(b));
    out.push_back({prefix + ".up", LayerKind::kConv});
  }
  if (output_norm_) out.push_back({"decoder.norm_out", LayerKind::kInstanceNorm});
  out.push_back({"decoder.conv_out", LayerKind::kConv});
  return out;
}

Codebook::Codebook(int size, int dim, Rng& rng) : vectors({size, dim}) {
  const double bound = 1.0 / size;
  for (double& v : vectors.data()) v = rng.uniform(-bound, bound);
  vectors.set_requires_grad();
}

Codebook::Codebook(Tensor v) : vectors(std::move(v)) {
  if (vectors.rank() != 2 || vectors.dim(0) < 2) throw ConfigError("codebook must be [K >= 2, c_q]");
  for (double x : vectors.data()) {
    if (std::isnan(x)) throw DataError("codebook contains NaN");
  }
}

Tensor Codebook::lookup(const std::vector<int>& indices, int h, int w) const {
  if (static_cast<int>(indices.size()) != h * w) throw ConfigError("codebook lookup: index count does not match grid");
  return reshape(transpose(gather_rows(vectors, indices)), {dim(), h, w});
}

LatentGrid quantize(const Tensor& zhat, const Codebook& codebook) {
  if (zhat.rank() != 3 || zhat.dim(0) != codebook.dim()) {
    throw ConfigError("quantize: latent " + shape_string(zhat.shape()) + " vs codebook dim " +
                      std::to_string(codebook.dim()));
  }
  LatentGrid grid;
  grid.zhat = zhat;
  grid.h = zhat.dim(1);
  grid.w = zhat.dim(2);
  const int cells = grid.h * grid.w;
  const int dim = codebook.dim();
  const auto z = zhat.data();
  const auto e = codebook.vectors.data();
  grid.indices.resize(static_cast<std::size_t>(cells));
  for (int p = 0; p < cells; ++p) {
    int best = 0;
    double best_distance = std::numeric_limits<double>::infinity();
    for (int k = 0; k < codebook.size(); ++k) {
      double distance = 0.0;
      for (int c = 0; c < dim; ++c) {
        const double diff = z[static_cast<std::size_t>(c) * cells + p] - e[static_cast<std::size_t>(k) * dim + c];
        distance += diff * diff;
      }
      if (std::isnan(distance)) throw DataError("quantize: NaN latent at cell " + std::to_string(p));
      if (distance < best_distance) {
        best_distance = distance;
        best = k;
      }
    }
    grid.indices[p] = best;
  }
  grid.zq = codebook.lookup(grid.indices, grid.h, grid.w);
  return grid;
}

DecodeResult local_decode(const Tensor& zq, const Tensor& zhat, const QuantMask& mq, const DecoderStack& decoder) {
  if (zq.shape() != zhat.shape() || zhat.rank() != 3 || zhat.dim(1) != mq.height() || zhat.dim(2) != mq.width()) {
    throw ConfigError("local_decode: z_q " + shape_string(zq.shape()) + ", ẑ " + shape_string(zhat.shape()) +
                      " and mask " + std::to_string(mq.height()) + "x" + std::to_string(mq.width()) + " disagree");
  }
  DecodeResult result;
  const Tensor quantized = straight_through(zhat, zq.detach());
  result.decoder_input = select_spatial(mq.flat(), zhat, quantized);
  result.image = decoder.forward(result.decoder_input);
  return result;
}

VqLosses vq_losses(const Tensor& recon, const Tensor& target, const Tensor& zhat, const Tensor& zq,
                   const QuantMask& mq, VqPhase phase, double commitment) {
  if (recon.shape() != target.shape()) throw ConfigError("vq_losses: reconstruction and target shapes differ");
  if (zhat.shape() != zq.shape() || zhat.rank() != 3 || zhat.dim(1) != mq.height() || zhat.dim(2) != mq.width()) {
    throw ConfigError("vq_losses: latent shapes disagree with the mask");
  }
  VqLosses losses;
  losses.recon = mean(abs(sub(recon, target)));

  const int cells = mq.size();
  int selected = 0;
  for (int p = 0; p < cells; ++p) selected += (phase == VqPhase::kPretrain || mq.at(p)) ? 1 : 0;
  if (selected == 0) {
    losses.codebook = Tensor::scalar(0.0);
    losses.commit = Tensor::scalar(0.0);
  } else {
    std::vector<double> weight(static_cast<std::size_t>(cells));
    for (int p = 0; p < cells; ++p) weight[p] = (phase == VqPhase::kPretrain || mq.at(p)) ? 1.0 / selected : 0.0;
    losses.codebook = sum(scale_spatial(square(sub(zhat.detach(), zq)), weight));
    losses.commit = scale(sum(scale_spatial(square(sub(zhat, zq.detach())), weight)), commitment);
  }
  losses.total = add(add(losses.recon, losses.codebook), losses.commit);
  return losses;
}

VqModel::VqModel(const VqConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  Rng rng = Rng::derive(seed, 0x7651);
  encoder_ = EncoderStack(config_, rng);
  decoder_ = DecoderStack(config_, rng);
  codebook_ = Codebook(config_.codebook_size, config_.code_dim, rng);
}

QuantMask VqModel::latent_mask(const PixelMask& mask) const {
  return masks::downsample_mask(mask, config_.downsample_factor());
}

LatentGrid VqModel::encode_quantized(const Tensor& image, const PixelMask& mask) const {
  return quantize(encode(image, mask), codebook_);
}

ParamList VqModel::parameters() const {
  ParamList out;
  encoder_.collect(out);
  decoder_.collect(out);
  out.push_back({"codebook.vectors", codebook_.vectors});
  return out;
}

}  // namespace lar::tsvq
