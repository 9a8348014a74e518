#include "lar/tsvq/layers.hpp"

#include "lar/error.hpp"
#include "lar/numerics/ops.hpp"

#include <cmath>

namespace lar::tsvq {

ConvLayer::ConvLayer(int in_channels, int out_channels, int kernel, int stride_, Rng& rng)
    : weight({out_channels, in_channels, kernel, kernel}), bias({out_channels}), stride(stride_) {
  const double bound = std::sqrt(3.0 / (in_channels * kernel * kernel));
  for (double& w : weight.data()) w = rng.uniform(-bound, bound);
  weight.set_requires_grad();
  bias.set_requires_grad();
}

Tensor ConvLayer::forward(const Tensor& x) const { return conv2d(x, weight, bias, stride, padding()); }

void ConvLayer::collect(ParamList& out, const std::string& prefix) const {
  out.push_back({prefix + ".weight", weight});
  out.push_back({prefix + ".bias", bias});
}

QuantMask TwoStreamConvLayer::output_mask(const QuantMask& mprime) const {
  return conv.stride == 1 ? mprime : masks::downsample_mask(mprime, conv.stride);
}

Tensor two_stream_conv(const Tensor& f, const QuantMask& mprime, const TwoStreamConvLayer& layer) {
  if (f.rank() != 3 || f.dim(1) != mprime.height() || f.dim(2) != mprime.width()) {
    throw ConfigError("two_stream_conv: features " + shape_string(f.shape()) + " vs mask " +
                      std::to_string(mprime.height()) + "x" + std::to_string(mprime.width()));
  }
  Tensor full = layer.conv.forward(f);
  const QuantMask leak = masks::leak_mask(mprime, layer.conv.kernel(), layer.conv.stride);
  if (!leak.any()) return full;

  const Tensor zeros(f.shape());
  Tensor masked_out = layer.conv.forward(select_spatial(mprime.flat(), f, zeros));
  return select_spatial(leak.flat(), full, masked_out);
}

InstanceNormLayer::InstanceNormLayer(int channels) : gain({channels}, 1.0), bias({channels}, 0.0) {
  gain.set_requires_grad();
  bias.set_requires_grad();
}

Tensor InstanceNormLayer::forward(const Tensor& x, const QuantMask* mask) const {
  if (mask && mask->any()) return instance_norm(x, gain, bias, mask->flat());
  return instance_norm(x, gain, bias);
}

void InstanceNormLayer::collect(ParamList& out, const std::string& prefix) const {
  out.push_back({prefix + ".gain", gain});
  out.push_back({prefix + ".bias", bias});
}

}  // namespace lar::tsvq
