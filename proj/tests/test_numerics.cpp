#include "lar/error.hpp"
#include "lar/numerics/adam.hpp"
#include "lar/numerics/grad_check.hpp"
#include "lar/numerics/ops.hpp"
#include "lar/numerics/rng.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <limits>

using namespace lar;

namespace {

Tensor random_tensor(Shape shape, Rng& rng) {
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = rng.uniform(-1.0, 1.0);
  return t;
}

double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

std::vector<double> naive_conv(const Tensor& in, const Tensor& w, const Tensor& b, int stride, int pad) {
  const int ci = in.dim(0), h = in.dim(1), wd = in.dim(2);
  const int co = w.dim(0), k = w.dim(2);
  const int oh = (h + 2 * pad - k) / stride + 1, ow = (wd + 2 * pad - k) / stride + 1;
  std::vector<double> out(static_cast<std::size_t>(co) * oh * ow);
  const auto x = in.data();
  const auto wt = w.data();
  for (int o = 0; o < co; ++o)
    for (int y = 0; y < oh; ++y)
      for (int xo = 0; xo < ow; ++xo) {
        double acc = b.data()[o];
        for (int c = 0; c < ci; ++c)
          for (int ky = 0; ky < k; ++ky)
            for (int kx = 0; kx < k; ++kx) {
              const int iy = y * stride + ky - pad, ix = xo * stride + kx - pad;
              if (iy < 0 || iy >= h || ix < 0 || ix >= wd) continue;
              acc += x[(c * h + iy) * wd + ix] * wt[((o * ci + c) * k + ky) * k + kx];
            }
        out[(o * oh + y) * ow + xo] = acc;
      }
  return out;
}

}  // namespace

TEST(Conv2d, AllOnesCountsOverlap) {
  const Tensor out = conv2d(Tensor({1, 3, 3}, 1.0), Tensor({1, 1, 3, 3}, 1.0), Tensor({1}), 1, 1);
  EXPECT_EQ(out.data()[4], 9.0);
  EXPECT_EQ(out.data()[0], 4.0);
  EXPECT_EQ(out.data()[2], 4.0);
  EXPECT_EQ(out.data()[8], 4.0);
  EXPECT_EQ(out.data()[1], 6.0);
}

TEST(Conv2d, IdentityKernel) {
  Rng rng(1);
  const Tensor x = random_tensor({1, 5, 4}, rng);
  Tensor w({1, 1, 3, 3});
  w.data()[4] = 1.0;
  const Tensor out = conv2d(x, w, Tensor({1}), 1, 1);
  EXPECT_EQ(max_abs_diff(out.data(), x.data()), 0.0);
}

TEST(Conv2d, MatchesLoopOracle) {
  Rng rng(2);
  for (int stride : {1, 2}) {
    for (int trial = 0; trial < 5; ++trial) {
      const Tensor x = random_tensor({2, 5 + trial % 3, 5 + trial % 2}, rng);
      const Tensor w = random_tensor({3, 2, 3, 3}, rng);
      const Tensor b = random_tensor({3}, rng);
      const Tensor out = conv2d(x, w, b, stride, 1);
      const auto ref = naive_conv(x, w, b, stride, 1);
      ASSERT_EQ(out.numel(), ref.size());
      EXPECT_LT(max_abs_diff(out.data(), ref), 1e-12);
    }
  }
}

TEST(Conv2d, ShapeMismatchNamesDimensions) {
  try {
    conv2d(Tensor({2, 4, 4}), Tensor({1, 3, 3, 3}), Tensor({1}), 1, 1);
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find('3'), std::string::npos);
  }
}

TEST(Matmul, SmallCases) {
  EXPECT_EQ(matmul(Tensor({1, 1}, {2.0}), Tensor({1, 1}, {3.0})).item(), 6.0);
  Rng rng(3);
  const Tensor a = random_tensor({3, 4}, rng);
  Tensor eye({3, 3});
  for (int i = 0; i < 3; ++i) eye.data()[i * 3 + i] = 1.0;
  EXPECT_EQ(max_abs_diff(matmul(eye, a).data(), a.data()), 0.0);
  EXPECT_THROW(matmul(Tensor({2, 3}), Tensor({2, 3})), ConfigError);
}

TEST(Matmul, MatchesTripleLoop) {
  Rng rng(4);
  for (int trial = 0; trial < 10; ++trial) {
    const int m = 1 + rng.uniform_int(8), k = 1 + rng.uniform_int(8), n = 1 + rng.uniform_int(8);
    const Tensor a = random_tensor({m, k}, rng), b = random_tensor({k, n}, rng);
    std::vector<double> ref(static_cast<std::size_t>(m) * n, 0.0);
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j)
        for (int p = 0; p < k; ++p) ref[i * n + j] += a.data()[i * k + p] * b.data()[p * n + j];
    EXPECT_LT(max_abs_diff(matmul(a, b).data(), ref), 1e-12);
  }
}

TEST(Softmax, Examples) {
  const Tensor u = softmax(Tensor({1, 4}));
  for (double v : u.data()) EXPECT_EQ(v, 0.25);

  const double inf = std::numeric_limits<double>::infinity();
  const Tensor m = softmax(Tensor({1, 2}, {-inf, 0.0}));
  EXPECT_EQ(m.data()[0], 0.0);
  EXPECT_EQ(m.data()[1], 1.0);

  const Tensor d = softmax(Tensor({1, 3}, {1.0, 2.0, 3.0}));
  const double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
  for (int i = 0; i < 3; ++i) EXPECT_NEAR(d.data()[i], std::exp(i + 1.0) / z, 1e-12);
}

TEST(Softmax, AllMaskedRowThrows) {
  const double inf = std::numeric_limits<double>::infinity();
  EXPECT_THROW(softmax(Tensor({2, 2}, {0.0, 1.0, -inf, -inf})), InvalidMaskError);
}

TEST(Softmax, RowsSumToOne) {
  Rng rng(5);
  const double inf = std::numeric_limits<double>::infinity();
  for (int trial = 0; trial < 20; ++trial) {
    Tensor x = random_tensor({4, 9}, rng);
    for (double& v : x.data()) v *= 30.0;
    for (int r = 0; r < 4; ++r)
      for (int c = 1; c < 9; ++c)
        if (rng.uniform() < 0.4) x.data()[r * 9 + c] = -inf;
    const Tensor y = softmax(x);
    for (int r = 0; r < 4; ++r) {
      double s = 0.0;
      for (int c = 0; c < 9; ++c) {
        if (std::isinf(x.data()[r * 9 + c])) EXPECT_EQ(y.data()[r * 9 + c], 0.0);
        s += y.data()[r * 9 + c];
      }
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
  }
}

TEST(InstanceNorm, ConstantChannelIsZero) {
  const Tensor y = instance_norm(Tensor({1, 2, 2}, 3.5), Tensor({1}, 1.0), Tensor({1}));
  for (double v : y.data()) EXPECT_EQ(v, 0.0);
}

TEST(InstanceNorm, SymmetricPair) {
  const Tensor y = instance_norm(Tensor({1, 1, 2}, {-1.0, 1.0}), Tensor({1}, 1.0), Tensor({1}));
  EXPECT_LT(std::abs(y.data()[0] + 1.0), 1e-4);
  EXPECT_LT(std::abs(y.data()[1] - 1.0), 1e-4);
  EXPECT_LT(std::abs(y.data()[1]), 1.0);
}

TEST(InstanceNorm, RandomChannelMoments) {
  Rng rng(6);
  Tensor x = random_tensor({3, 6, 5}, rng);
  for (double& v : x.data()) v = 20.0 * v + 2.0;
  const Tensor y = instance_norm(x, Tensor({3}, 1.0), Tensor({3}));
  for (int c = 0; c < 3; ++c) {
    double m = 0.0, v = 0.0;
    for (int i = 0; i < 30; ++i) m += y.data()[c * 30 + i];
    m /= 30;
    for (int i = 0; i < 30; ++i) v += (y.data()[c * 30 + i] - m) * (y.data()[c * 30 + i] - m);
    v /= 30;
    EXPECT_LT(std::abs(m), 1e-10);
    EXPECT_NEAR(v, 1.0, 1e-6);
  }
}

TEST(InstanceNorm, ExcludedPositionsDoNotAffectOthers) {
  Rng rng(7);
  const Tensor x = random_tensor({2, 4, 4}, rng);
  Tensor x2 = x.detach();
  std::vector<std::uint8_t> ex(16, 0);
  ex[5] = ex[10] = 1;
  x2.data()[5] = 100.0;
  x2.data()[16 + 10] = -50.0;
  const Tensor g({2}, 1.0), b({2});
  const Tensor y1 = instance_norm(x, g, b, ex), y2 = instance_norm(x2, g, b, ex);
  for (int c = 0; c < 2; ++c)
    for (int p = 0; p < 16; ++p)
      if (!ex[p]) EXPECT_EQ(y1.data()[c * 16 + p], y2.data()[c * 16 + p]);
}

TEST(MaxPool, Examples) {
  EXPECT_EQ(sum(max_pool2d(Tensor({1, 4, 4}), 2, 2)).item(), 0.0);

  Tensor one({1, 4, 4});
  one.data()[2 * 4 + 3] = 1.0;
  const Tensor p = max_pool2d(one, 2, 2);
  EXPECT_EQ(sum(p).item(), 1.0);
  EXPECT_EQ(p.data()[1 * 2 + 1], 1.0);

  Rng rng(8);
  Tensor bin({1, 8, 8});
  for (double& v : bin.data()) v = rng.uniform() < 0.2 ? 1.0 : 0.0;
  const Tensor q = max_pool2d(bin, 2, 2);
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 4; ++x) {
      bool any = false;
      for (int dy = 0; dy < 2; ++dy)
        for (int dx = 0; dx < 2; ++dx) any |= bin.data()[(2 * y + dy) * 8 + 2 * x + dx] != 0.0;
      EXPECT_EQ(q.data()[y * 4 + x], any ? 1.0 : 0.0);
    }
  EXPECT_THROW(max_pool2d(Tensor({1, 5, 5}), 2, 2), ConfigError);
}

TEST(GradCheck, Examples) {
  Rng rng(9);
  const auto mm = grad_check([](std::span<const Tensor> in) { return matmul(in[0], in[1]); },
                             {random_tensor({3, 4}, rng), random_tensor({4, 2}, rng)}, 1e-5);
  EXPECT_LT(mm.max_rel_error, 1e-9);

  const auto cv = grad_check([](std::span<const Tensor> in) { return conv2d(in[0], in[1], in[2], 1, 1); },
                             {random_tensor({2, 6, 6}, rng), random_tensor({2, 2, 3, 3}, rng), random_tensor({2}, rng)},
                             1e-5);
  EXPECT_LT(cv.max_rel_error, 1e-6);

  const auto sm = grad_check([](std::span<const Tensor> in) { return softmax(in[0]); }, {random_tensor({1, 8}, rng)},
                             1e-5);
  EXPECT_LT(sm.max_rel_error, 1e-6);
}

// Every differentiable op over 20 random trials.
TEST(GradCheck, EveryOpTwentyTrials) {
  struct Case {
    const char* name;
    DifferentiableFn fn;
    std::vector<Shape> shapes;
  };
  const std::vector<Case> cases = {
      {"conv2d", [](std::span<const Tensor> in) { return conv2d(in[0], in[1], in[2], 2, 1); },
       {{2, 6, 6}, {3, 2, 3, 3}, {3}}},
      {"swish", [](std::span<const Tensor> in) { return swish(in[0]); }, {{2, 3, 3}}},
      {"gelu", [](std::span<const Tensor> in) { return gelu(in[0]); }, {{2, 3, 3}}},
      {"tanh", [](std::span<const Tensor> in) { return lar::tanh(in[0]); }, {{2, 3, 3}}},
      {"log_softmax", [](std::span<const Tensor> in) { return log_softmax(in[0]); }, {{3, 7}}},
      {"layer_norm", [](std::span<const Tensor> in) { return layer_norm(in[0], in[1], in[2]); }, {{4, 9}, {9}, {9}}},
      {"instance_norm", [](std::span<const Tensor> in) { return instance_norm(in[0], in[1], in[2]); },
       {{3, 4, 4}, {3}, {3}}},
      {"upsample", [](std::span<const Tensor> in) { return upsample_nearest(in[0], 2); }, {{2, 3, 3}}},
      {"square_mean", [](std::span<const Tensor> in) { return mean(square(in[0])); }, {{2, 3, 3}}},
  };
  Rng rng(10);
  for (const Case& c : cases) {
    double worst = 0.0;
    for (int trial = 0; trial < 20; ++trial) {
      std::vector<Tensor> in;
      for (const Shape& s : c.shapes) in.push_back(random_tensor(s, rng));
      worst = std::max(worst, grad_check(c.fn, in, 1e-5, trial).max_rel_error);
    }
    EXPECT_LT(worst, 1e-5) << c.name;
  }
}

namespace {

// Plain scalar Adam with the same update rule.
struct ScalarAdam {
  double m = 0, v = 0;
  int t = 0;
  double step(double x, double g, const AdamConfig& c) {
    ++t;
    m = c.beta1 * m + (1 - c.beta1) * g;
    v = c.beta2 * v + (1 - c.beta2) * g * g;
    const double mh = m / (1 - std::pow(c.beta1, t));
    const double vh = v / (1 - std::pow(c.beta2, t));
    return x - c.lr * (mh / (std::sqrt(vh) + c.eps) + c.weight_decay * x);
  }
};

}  // namespace

TEST(Adam, ZeroGradientLeavesParameters) {
  std::vector<Tensor> p{Tensor({3}, {1.0, -2.0, 0.5})};
  p[0].set_requires_grad();
  p[0].zero_grad();
  AdamState s;
  adam_step(p, s, {1e-2, 0.9, 0.999, 1e-8, 0.0});
  EXPECT_EQ(p[0].data()[0], 1.0);
  EXPECT_EQ(p[0].data()[1], -2.0);
  EXPECT_EQ(s.step, 1);
}

TEST(Adam, FirstStepMagnitudeIsLr) {
  std::vector<Tensor> p{Tensor({2}, {0.0, 0.0})};
  p[0].set_requires_grad();
  p[0].grad()[0] = 3.0;
  p[0].grad()[1] = -0.25;
  AdamState s;
  adam_step(p, s, {1e-3, 0.5, 0.9, 1e-8, 0.0});
  EXPECT_NEAR(p[0].data()[0], -1e-3, 1e-10);
  EXPECT_NEAR(p[0].data()[1], 1e-3, 1e-10);
}

TEST(Adam, QuadraticMatchesScalarReference) {
  for (const AdamConfig c : {AdamConfig{0.1, 0.9, 0.999, 1e-8, 0.0}, AdamConfig{0.05, 0.5, 0.9, 1e-8, 0.01}}) {
    std::vector<Tensor> p{Tensor({1}, {2.0})};
    p[0].set_requires_grad();
    AdamState s;
    ScalarAdam ref;
    double x = 2.0;
    for (int i = 0; i < 3; ++i) {
      p[0].zero_grad();
      Tensor loss = mul(p[0], p[0]);
      sum(loss).backward();
      x = ref.step(x, 2 * x, c);
      adam_step(p, s, c);
      EXPECT_NEAR(p[0].data()[0], x, 1e-12);
    }
    EXPECT_EQ(s.step, 3);
  }
}

TEST(Adam, NonFiniteGradientAbortsUntouched) {
  std::vector<Tensor> p{Tensor({2}, {1.0, 2.0})};
  p[0].set_requires_grad();
  p[0].grad()[0] = 1.0;
  AdamState s;
  adam_step(p, s, {});
  const std::vector<double> before(p[0].data().begin(), p[0].data().end());
  const auto m = s.first_moment;
  p[0].grad()[1] = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(adam_step(p, s, {}), TrainingError);
  EXPECT_EQ(p[0].data()[0], before[0]);
  EXPECT_EQ(p[0].data()[1], before[1]);
  EXPECT_EQ(s.first_moment, m);
  EXPECT_EQ(s.step, 1);
}

TEST(Rng, SameSeedSameStream) {
  Rng a(42), b(42), c(43);
  bool differs = false;
  for (int i = 0; i < 100; ++i) {
    const auto x = a.next();
    EXPECT_EQ(x, b.next());
    differs |= x != c.next();
  }
  EXPECT_TRUE(differs);
  // First output of mt19937_64 seeded with 5489 is fixed by the standard.
  EXPECT_EQ(Rng(5489).next(), 14514284786278117030ull);
  Rng d1 = Rng::derive(7, 3), d2 = Rng::derive(7, 3), d3 = Rng::derive(7, 4);
  EXPECT_EQ(d1.next(), d2.next());
  EXPECT_NE(d1.next(), d3.next());
}

TEST(Rng, UniformRanges) {
  Rng r(1);
  for (int i = 0; i < 1000; ++i) {
    const double u = r.uniform();
    EXPECT_GE(u, 0.0);
    EXPECT_LT(u, 1.0);
    const int k = r.uniform_int(7);
    EXPECT_GE(k, 0);
    EXPECT_LT(k, 7);
  }
}

TEST(Determinism, RepeatedOpsBitIdentical) {
  Rng rng(11);
  const Tensor x = random_tensor({3, 8, 8}, rng), w = random_tensor({4, 3, 3, 3}, rng), b = random_tensor({4}, rng);
  const Tensor y1 = swish(instance_norm(conv2d(x, w, b, 1, 1), Tensor({4}, 1.0), Tensor({4})));
  const Tensor y2 = swish(instance_norm(conv2d(x, w, b, 1, 1), Tensor({4}, 1.0), Tensor({4})));
  EXPECT_EQ(max_abs_diff(y1.data(), y2.data()), 0.0);
}
