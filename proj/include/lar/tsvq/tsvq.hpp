#pragma once

#include "lar/masks/masks.hpp"
#include "lar/numerics/rng.hpp"
#include "lar/numerics/tensor.hpp"
#include "lar/tsvq/layers.hpp"

#include <optional>
#include <vector>

namespace lar::tsvq {

using masks::PixelMask;

struct VqConfig {
  int image_channels = 3;
  int image_size = 32;
  std::vector<int> channels = {32, 64};  ///< one entry per 2x downsampling level
  int res_blocks = 1;                    ///< residual blocks per level
  int code_dim = 32;
  int codebook_size = 64;
  double commitment = 0.25;
  /// InstanceNorm + SWISH before each stack's output convolution. Off by
  /// default: at this scale per-image statistics there erase the mean colour.
  bool output_norm = false;

  int downsample_factor() const { return 1 << channels.size(); }
  int latent_size() const { return image_size / downsample_factor(); }
  void validate() const;
};

/// Residual block; the encoder flavour uses two-stream convolutions and
/// mask-excluded normalization statistics, the decoder flavour plain layers.
struct ResidualBlock {
  InstanceNormLayer norm1;
  InstanceNormLayer norm2;
  ConvLayer conv1;
  ConvLayer conv2;
  std::optional<ConvLayer> skip;  ///< 1x1 projection when channels change
  bool two_stream = true;

  ResidualBlock() = default;
  ResidualBlock(int in_channels, int out_channels, bool two_stream, Rng& rng);

  /// `mask` is ignored by the decoder flavour. `plain` forces ordinary
  /// convolutions and full statistics in the encoder flavour.
  Tensor forward(const Tensor& x, const QuantMask& mask, bool plain = false) const;
  void collect(ParamList& out, const std::string& prefix) const;
  void describe(std::vector<LayerInfo>& out, const std::string& prefix) const;
};

class EncoderStack {
 public:
  EncoderStack() = default;
  EncoderStack(const VqConfig& config, Rng& rng);

  /// Threads the max-pooled mask through every two-stream layer.
  Tensor forward(const Tensor& image, const PixelMask& mask) const;
  /// Same weights with every two-stream layer run as a plain convolution.
  Tensor forward_plain(const Tensor& image) const;

  void collect(ParamList& out) const;
  std::vector<LayerInfo> describe() const;

 private:
  Tensor run(const Tensor& image, const QuantMask& mask, bool plain) const;

  TwoStreamConvLayer conv_in_;
  std::vector<std::vector<ResidualBlock>> levels_;
  std::vector<TwoStreamConvLayer> down_;
  ResidualBlock mid_;
  bool output_norm_ = false;
  InstanceNormLayer norm_out_;
  TwoStreamConvLayer conv_out_;
};

class DecoderStack {
 public:
  DecoderStack() = default;
  DecoderStack(const VqConfig& config, Rng& rng);

  /// Latent [c_q, h, w] to image [C, H, W] in [-1, 1].
  Tensor forward(const Tensor& latent) const;

  void collect(ParamList& out) const;
  std::vector<LayerInfo> describe() const;

 private:
  ConvLayer conv_in_;
  ResidualBlock mid_;
  std::vector<std::vector<ResidualBlock>> levels_;
  std::vector<ConvLayer> up_;
  bool output_norm_ = false;
  InstanceNormLayer norm_out_;
  ConvLayer conv_out_;
};

struct Codebook {
  Tensor vectors;  ///< [K, c_q]

  Codebook() = default;
  /// Entries uniform in [-1/K, 1/K].
  Codebook(int size, int dim, Rng& rng);
  explicit Codebook(Tensor vectors);

  int size() const { return vectors.dim(0); }
  int dim() const { return vectors.dim(1); }
  /// Rows of the codebook arranged as a [c_q, h, w] grid; differentiable
  /// with respect to the codebook.
  Tensor lookup(const std::vector<int>& indices, int h, int w) const;
};

struct LatentGrid {
  Tensor zhat;               ///< [c_q, h, w] continuous encoder output
  Tensor zq;                 ///< codebook vectors at `indices`
  std::vector<int> indices;  ///< raster order, h*w entries
  int h = 0;
  int w = 0;
};

/// Nearest codebook entry per cell (Euclidean, ties to the lowest index).
/// Fills zq and indices of a grid whose zhat is set. Throws DataError on NaN.
LatentGrid quantize(const Tensor& zhat, const Codebook& codebook);

struct DecodeResult {
  Tensor image;
  Tensor decoder_input;  ///< z_q ⊙ M_q + ẑ ⊙ (1 − M_q)
};

/// Decodes quantized vectors inside `mq` and continuous features outside it.
/// Gradients reach `zhat` through the straight-through estimator at quantized
/// cells and directly elsewhere; `zq` is treated as a constant.
DecodeResult local_decode(const Tensor& zq, const Tensor& zhat, const QuantMask& mq, const DecoderStack& decoder);

enum class VqPhase { kPretrain, kFinetune };

struct VqLosses {
  Tensor recon;     ///< mean absolute error over the full image
  Tensor codebook;  ///< ‖sg(ẑ) − z_q‖² averaged over selected cells
  Tensor commit;    ///< β‖ẑ − sg(z_q)‖² averaged over selected cells
  Tensor total;
};

/// Codebook/commit terms average over all cells when pretraining and over
/// masked cells when finetuning (zero if there are none).
VqLosses vq_losses(const Tensor& recon, const Tensor& target, const Tensor& zhat, const Tensor& zq,
                   const QuantMask& mq, VqPhase phase, double commitment = 0.25);

/// Encoder, decoder and codebook of the two-stream VQ autoencoder.
class VqModel {
 public:
  VqModel() = default;
  VqModel(const VqConfig& config, std::uint64_t seed);

  const VqConfig& config() const { return config_; }
  const EncoderStack& encoder() const { return encoder_; }
  const DecoderStack& decoder() const { return decoder_; }
  const Codebook& codebook() const { return codebook_; }

  Tensor encode(const Tensor& image, const PixelMask& mask) const { return encoder_.forward(image, mask); }
  LatentGrid encode_quantized(const Tensor& image, const PixelMask& mask) const;
  QuantMask latent_mask(const PixelMask& mask) const;

  /// Parameters in a fixed order with stable names.
  ParamList parameters() const;

 private:
  VqConfig config_;
  EncoderStack encoder_;
  DecoderStack decoder_;
  Codebook codebook_;
};

}  // namespace lar::tsvq
