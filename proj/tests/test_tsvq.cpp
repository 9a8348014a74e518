#include "lar/error.hpp"
#include "lar/numerics/ops.hpp"
#include "lar/tsvq/tsvq.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <set>

using namespace lar;
using namespace lar::tsvq;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = scale * rng.uniform(-1.0, 1.0);
  return t;
}

VqConfig small_config() {
  VqConfig c;
  c.image_size = 16;
  c.channels = {8, 8};
  c.code_dim = 4;
  c.codebook_size = 16;
  return c;
}

PixelMask random_box_mask(Rng& rng, int size) {
  PixelMask m(size, size);
  const int boxes = 1 + rng.uniform_int(2);
  for (int b = 0; b < boxes; ++b) {
    const int bh = 1 + rng.uniform_int(size / 2), bw = 1 + rng.uniform_int(size / 2);
    const int y0 = rng.uniform_int(size - bh + 1), x0 = rng.uniform_int(size - bw + 1);
    for (int y = y0; y < y0 + bh; ++y)
      for (int x = x0; x < x0 + bw; ++x) m.set(y, x);
  }
  return m;
}

bool bit_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  for (std::size_t i = 0; i < a.numel(); ++i)
    if (a.data()[i] != b.data()[i]) return false;
  return true;
}

}  // namespace

TEST(TwoStreamConv, EmptyAndFullMasksReduceToPlainConv) {
  Rng rng(1);
  const TwoStreamConvLayer layer(3, 4, 3, 1, rng);
  const TwoStreamConvLayer down(3, 4, 3, 2, rng);
  const Tensor f = random_tensor({3, 6, 6}, rng);
  EXPECT_TRUE(bit_equal(two_stream_conv(f, QuantMask(6, 6), layer), layer.conv.forward(f)));
  EXPECT_TRUE(bit_equal(two_stream_conv(f, QuantMask::ones(6, 6), layer), layer.conv.forward(f)));
  EXPECT_TRUE(bit_equal(two_stream_conv(f, QuantMask(6, 6), down), down.conv.forward(f)));
}

TEST(TwoStreamConv, UnmaskedOutputsIgnoreMaskedInput) {
  Rng rng(2);
  for (int stride : {1, 2}) {
    const TwoStreamConvLayer layer(2, 3, 3, stride, rng);
    for (int trial = 0; trial < 20; ++trial) {
      QuantMask m(8, 8);
      const int cell = rng.uniform_int(64);
      m.set(cell);
      const Tensor f = random_tensor({2, 8, 8}, rng);
      Tensor g = f.detach();
      g.data()[cell] += 5.0;
      g.data()[64 + cell] -= 3.0;
      const Tensor a = two_stream_conv(f, m, layer), b = two_stream_conv(g, m, layer);
      const QuantMask out = layer.output_mask(m);
      const int cells = out.size();
      for (int c = 0; c < 3; ++c)
        for (int p = 0; p < cells; ++p)
          if (!out.at(p)) EXPECT_EQ(a.data()[c * cells + p], b.data()[c * cells + p]);
    }
  }
  EXPECT_THROW(two_stream_conv(Tensor({2, 8, 8}), QuantMask(4, 4), TwoStreamConvLayer(2, 3, 3, 1, rng)), ConfigError);
}

TEST(Encoder, Determinism) {
  const VqModel model(small_config(), 3);
  const Tensor zero({3, 16, 16});
  EXPECT_TRUE(bit_equal(model.encode(zero, PixelMask(16, 16)), model.encode(zero, PixelMask(16, 16))));
  const VqModel again(small_config(), 3);
  EXPECT_TRUE(bit_equal(model.encode(zero, PixelMask(16, 16)), again.encode(zero, PixelMask(16, 16))));
}

TEST(Encoder, ZeroMaskEqualsPlainStack) {
  const VqModel model(small_config(), 4);
  Rng rng(4);
  for (int trial = 0; trial < 5; ++trial) {
    const Tensor img = random_tensor({3, 16, 16}, rng);
    EXPECT_TRUE(bit_equal(model.encode(img, PixelMask(16, 16)), model.encoder().forward_plain(img)));
  }
}

TEST(Encoder, LeakageInvariance) {
  const VqModel model(small_config(), 5);
  Rng rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    const Tensor img = random_tensor({3, 16, 16}, rng);
    const PixelMask m = random_box_mask(rng, 16);
    Tensor perturbed = img.detach();
    for (int c = 0; c < 3; ++c)
      for (int p = 0; p < 256; ++p)
        if (m.at(p)) perturbed.data()[c * 256 + p] = rng.uniform(-1.0, 1.0);
    const Tensor a = model.encode(img, m), b = model.encode(perturbed, m);
    const QuantMask mq = model.latent_mask(m);
    const int cells = mq.size();
    int checked = 0;
    for (int c = 0; c < a.dim(0); ++c)
      for (int p = 0; p < cells; ++p)
        if (!mq.at(p)) {
          ASSERT_EQ(a.data()[c * cells + p], b.data()[c * cells + p]) << "trial " << trial << " cell " << p;
          ++checked;
        }
    if (mq.count() < cells) EXPECT_GT(checked, 0);
  }
}

TEST(Decoder, HasNoTwoStreamLayers) {
  const VqModel model(small_config(), 6);
  int two_stream = 0;
  for (const LayerInfo& l : model.decoder().describe()) EXPECT_NE(l.kind, LayerKind::kTwoStreamConv) << l.name;
  for (const LayerInfo& l : model.encoder().describe()) two_stream += l.kind == LayerKind::kTwoStreamConv;
  EXPECT_GT(two_stream, 0);
}

TEST(Quantize, ExactEntryAndTieBreak) {
  Rng rng(7);
  const Codebook cb(random_tensor({8, 3}, rng));
  Tensor z({3, 1, 1});
  for (int c = 0; c < 3; ++c) z.data()[c] = cb.vectors.data()[5 * 3 + c];
  const LatentGrid g = quantize(z, cb);
  EXPECT_EQ(g.indices[0], 5);
  EXPECT_TRUE(bit_equal(g.zq, z));

  // Entries 2 and 4 equidistant from the origin, everything else far away.
  Tensor v({6, 2}, 10.0);
  v.data()[2 * 2] = 1.0;
  v.data()[2 * 2 + 1] = 0.0;
  v.data()[4 * 2] = 0.0;
  v.data()[4 * 2 + 1] = -1.0;
  EXPECT_EQ(quantize(Tensor({2, 1, 1}), Codebook(v)).indices[0], 2);

  Tensor nan({3, 1, 1});
  nan.data()[1] = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(quantize(nan, cb), DataError);
  EXPECT_THROW(quantize(Tensor({4, 1, 1}), cb), ConfigError);
}

TEST(Quantize, MatchesBruteForceScan) {
  Rng rng(8);
  for (int k : {2, 16, 64}) {
    const Codebook cb(random_tensor({k, 5}, rng));
    // Snap some cells onto codebook entries and duplicate entries to force ties.
    Tensor z = random_tensor({5, 10, 10}, rng);
    for (int p = 0; p < 100; p += 7) {
      const int e = rng.uniform_int(k);
      for (int c = 0; c < 5; ++c) z.data()[c * 100 + p] = cb.vectors.data()[e * 5 + c];
    }
    const LatentGrid g = quantize(z, cb);
    for (int p = 0; p < 100; ++p) {
      int best = -1;
      double best_d = 0.0;
      for (int e = 0; e < k; ++e) {
        double d = 0.0;
        for (int c = 0; c < 5; ++c) d += std::pow(z.data()[c * 100 + p] - cb.vectors.data()[e * 5 + c], 2);
        if (best < 0 || d < best_d) best = e, best_d = d;
      }
      EXPECT_EQ(g.indices[p], best);
      for (int c = 0; c < 5; ++c) EXPECT_EQ(g.zq.data()[c * 100 + p], cb.vectors.data()[best * 5 + c]);
    }
  }
  Tensor dup({4, 2});
  for (int e = 0; e < 4; ++e) dup.data()[e * 2] = e < 2 ? 1.0 : 3.0;
  EXPECT_EQ(quantize(Tensor({2, 1, 1}, 2.0), Codebook(dup)).indices[0], 0);
}

TEST(LocalDecode, MaskLimitsAndBlend) {
  const VqModel model(small_config(), 9);
  Rng rng(9);
  const Tensor img = random_tensor({3, 16, 16}, rng);
  const LatentGrid g = model.encode_quantized(img, PixelMask(16, 16));

  const DecodeResult none = local_decode(g.zq, g.zhat, QuantMask(4, 4), model.decoder());
  EXPECT_TRUE(bit_equal(none.image, model.decoder().forward(g.zhat)));
  const DecodeResult all = local_decode(g.zq, g.zhat, QuantMask::ones(4, 4), model.decoder());
  EXPECT_TRUE(bit_equal(all.image, model.decoder().forward(g.zq)));

  QuantMask mixed(4, 4);
  for (int p : {1, 5, 6, 14}) mixed.set(p);
  const DecodeResult mix = local_decode(g.zq, g.zhat, mixed, model.decoder());
  Tensor blend(g.zhat.shape());
  for (int c = 0; c < g.zhat.dim(0); ++c)
    for (int p = 0; p < 16; ++p)
      blend.data()[c * 16 + p] = mixed.at(p) ? g.zq.data()[c * 16 + p] : g.zhat.data()[c * 16 + p];
  EXPECT_TRUE(bit_equal(mix.decoder_input, blend));
  EXPECT_TRUE(bit_equal(mix.image, model.decoder().forward(blend)));
}

TEST(LocalDecode, StraightThroughMatchesFiniteDifferences) {
  const VqModel model(small_config(), 10);
  Rng rng(10);
  const Tensor img = random_tensor({3, 16, 16}, rng);
  const LatentGrid g = model.encode_quantized(img, PixelMask(16, 16));
  QuantMask mq(4, 4);
  for (int p : {0, 3, 9, 10}) mq.set(p);
  const Tensor probe = random_tensor({3, 16, 16}, rng);

  Tensor zhat = g.zhat.detach();
  zhat.set_requires_grad();
  sum(mul(local_decode(g.zq, zhat, mq, model.decoder()).image, probe)).backward();

  // Finite differences of the same loss as a function of the decoder input.
  const DecodeResult base = local_decode(g.zq, g.zhat.detach(), mq, model.decoder());
  NoGradGuard no_grad;
  const double eps = 1e-5;
  double worst = 0.0;
  for (int c = 0; c < zhat.dim(0); ++c)
    for (int p = 0; p < 16; ++p) {
      if (!mq.at(p)) continue;
      const std::size_t i = static_cast<std::size_t>(c) * 16 + p;
      Tensor plus = base.decoder_input.detach(), minus = base.decoder_input.detach();
      plus.data()[i] += eps;
      minus.data()[i] -= eps;
      const double numeric = (sum(mul(model.decoder().forward(plus), probe)).item() -
                              sum(mul(model.decoder().forward(minus), probe)).item()) /
                             (2 * eps);
      const double analytic = zhat.grad()[i];
      worst = std::max(worst, std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-3}));
    }
  EXPECT_LT(worst, 1e-4);
}

TEST(VqLosses, Examples) {
  Rng rng(11);
  const Tensor t = random_tensor({3, 4, 4}, rng);
  const Tensor z = random_tensor({2, 2, 2}, rng);
  const VqLosses same = vq_losses(t, t, z, z, QuantMask::ones(2, 2), VqPhase::kPretrain);
  EXPECT_EQ(same.recon.item(), 0.0);
  EXPECT_EQ(same.codebook.item(), 0.0);
  EXPECT_EQ(same.commit.item(), 0.0);
}

TEST(VqLosses, DirectFormula) {
  Rng rng(12);
  for (int trial = 0; trial < 10; ++trial) {
    const Tensor r = random_tensor({3, 4, 4}, rng), t = random_tensor({3, 4, 4}, rng);
    const Tensor zh = random_tensor({2, 3, 3}, rng), zq = random_tensor({2, 3, 3}, rng);
    QuantMask mq(3, 3);
    for (int p = 0; p < 9; ++p)
      if (rng.uniform() < 0.4) mq.set(p);
    for (VqPhase phase : {VqPhase::kPretrain, VqPhase::kFinetune}) {
      double recon = 0.0;
      for (std::size_t i = 0; i < r.numel(); ++i) recon += std::abs(r.data()[i] - t.data()[i]);
      recon /= static_cast<double>(r.numel());
      double sq = 0.0;
      int n = 0;
      for (int p = 0; p < 9; ++p) {
        if (phase == VqPhase::kFinetune && !mq.at(p)) continue;
        ++n;
        for (int c = 0; c < 2; ++c) sq += std::pow(zh.data()[c * 9 + p] - zq.data()[c * 9 + p], 2);
      }
      const double cb = n ? sq / n : 0.0;
      const VqLosses l = vq_losses(r, t, zh, zq, mq, phase, 0.25);
      EXPECT_NEAR(l.recon.item(), recon, 1e-12);
      EXPECT_NEAR(l.codebook.item(), cb, 1e-12);
      EXPECT_NEAR(l.commit.item(), 0.25 * cb, 1e-12);
      EXPECT_NEAR(l.total.item(), recon + 1.25 * cb, 1e-12);
    }
  }
}

TEST(VqLosses, StopGradientsRouteToTheRightSide) {
  Rng rng(13);
  Tensor zh = random_tensor({2, 2, 2}, rng), zq = random_tensor({2, 2, 2}, rng);
  zh.set_requires_grad();
  zq.set_requires_grad();
  const Tensor img({1, 2, 2});
  vq_losses(img, img, zh, zq, QuantMask::ones(2, 2), VqPhase::kPretrain).codebook.backward();
  for (double g : zh.grad()) EXPECT_EQ(g, 0.0);
  zq.zero_grad();
  zh.zero_grad();
  vq_losses(img, img, zh, zq, QuantMask::ones(2, 2), VqPhase::kPretrain).commit.backward();
  for (double g : zq.grad()) EXPECT_EQ(g, 0.0);
  for (std::size_t i = 0; i < 8; ++i) EXPECT_NEAR(zh.grad()[i], 0.25 * 2 * (zh.data()[i] - zq.data()[i]) / 4, 1e-12);
}

TEST(Codebook, InitRangeAndParameters) {
  const VqModel model(small_config(), 14);
  for (double v : model.codebook().vectors.data()) EXPECT_LE(std::abs(v), 1.0 / 16);
  const ParamList p = model.parameters();
  EXPECT_EQ(p.back().name, "codebook.vectors");
  std::set<std::string> names;
  for (const auto& n : p) EXPECT_TRUE(names.insert(n.name).second) << n.name;
  EXPECT_THROW(Codebook(Tensor({1, 3})), ConfigError);
}
