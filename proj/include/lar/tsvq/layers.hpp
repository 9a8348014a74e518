#pragma once

#include "lar/masks/masks.hpp"
#include "lar/numerics/rng.hpp"
#include "lar/numerics/tensor.hpp"

#include <string>
#include <vector>

namespace lar {

/// A parameter tensor together with its stable checkpoint name.
struct NamedTensor {
  std::string name;
  Tensor tensor;
};
using ParamList = std::vector<NamedTensor>;

}  // namespace lar

namespace lar::tsvq {

using masks::QuantMask;

enum class LayerKind { kConv, kTwoStreamConv, kInstanceNorm };

struct LayerInfo {
  std::string name;
  LayerKind kind;
};

/// Odd-kernel convolution with "same" padding.
struct ConvLayer {
  Tensor weight;  // [out, in, k, k]
  Tensor bias;    // [out]
  int stride = 1;

  ConvLayer() = default;
  ConvLayer(int in_channels, int out_channels, int kernel, int stride, Rng& rng);

  int kernel() const { return weight.dim(2); }
  int padding() const { return kernel() / 2; }
  Tensor forward(const Tensor& x) const;
  void collect(ParamList& out, const std::string& prefix) const;
};

/// One weight set applied to both the full feature map and its mask-zeroed
/// copy; the two results are blended over the leak ring.
struct TwoStreamConvLayer {
  ConvLayer conv;

  TwoStreamConvLayer() = default;
  TwoStreamConvLayer(int in_channels, int out_channels, int kernel, int stride, Rng& rng)
      : conv(in_channels, out_channels, kernel, stride, rng) {}
  explicit TwoStreamConvLayer(ConvLayer shared) : conv(std::move(shared)) {}

  /// Mask at this layer's output resolution.
  QuantMask output_mask(const QuantMask& mprime) const;
  void collect(ParamList& out, const std::string& prefix) const { conv.collect(out, prefix); }
};

/// F_m = F ⊙ (1 − M′); output = conv(F) outside the leak ring and conv(F_m)
/// on it. With an empty leak ring the second convolution is skipped.
Tensor two_stream_conv(const Tensor& f, const QuantMask& mprime, const TwoStreamConvLayer& layer);

struct InstanceNormLayer {
  Tensor gain;
  Tensor bias;

  InstanceNormLayer() = default;
  explicit InstanceNormLayer(int channels);

  /// Statistics exclude masked positions when `mask` has any masked cell.
  Tensor forward(const Tensor& x, const QuantMask* mask = nullptr) const;
  void collect(ParamList& out, const std::string& prefix) const;
};

}  // namespace lar::tsvq
