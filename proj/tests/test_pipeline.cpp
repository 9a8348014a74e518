#include "lar/error.hpp"
#include "lar/pipeline/checkpoint.hpp"
#include "lar/pipeline/config.hpp"
#include "lar/pipeline/dataset.hpp"
#include "lar/pipeline/image_io.hpp"
#include "lar/pipeline/inference.hpp"
#include "lar/pipeline/metrics.hpp"
#include "lar/pipeline/train.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>

using namespace lar;
using namespace lar::pipeline;
namespace fs = std::filesystem;

namespace {

const char* kSmallConfig = R"(
seed = 11
image_size = 16
dataset_size = 64
glyph_min = 3
glyph_max = 5
max_shift = 3
mask_margin = 1
n_landmarks = 3
vq_channels = 8,8
code_dim = 8
codebook_size = 64
vq_batch = 4
vq_pretrain_steps = 100
vq_finetune_steps = 100
vq_decay_every = 0
vq_lr = 2e-3
tr_depth = 1
tr_d_model = 16
tr_heads = 2
tr_d_ff = 32
tr_point_hidden = 8
tr_dropout = 0.1
tr_batch = 4
tr_steps = 20
tr_warmup = 4
sample_top_k = 8
)";

RunConfig small_config() { return parse_config(kSmallConfig, "small"); }

class TempDir {
 public:
  TempDir() {
    path_ = fs::temp_directory_path() / ("lar_test_" + std::to_string(::testing::UnitTest::GetInstance()->random_seed()) +
                                         "_" + ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

std::vector<std::uint8_t> file_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

bool params_equal(const ParamList& a, const ParamList& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].name != b[i].name || a[i].tensor.shape() != b[i].tensor.shape()) return false;
    const auto x = a[i].tensor.data(), y = b[i].tensor.data();
    if (!std::equal(x.begin(), x.end(), y.begin())) return false;
  }
  return true;
}

Image random_image(Rng& rng, int c, int h, int w) {
  Image img(c, h, w);
  for (double& v : img.values) v = rng.uniform();
  return img;
}

}  // namespace

TEST(Config, ParseAndRoundTrip) {
  const RunConfig c = small_config();
  EXPECT_EQ(c.seed, 11u);
  EXPECT_EQ(c.vq.channels, (std::vector<int>{8, 8}));
  EXPECT_EQ(c.vq.latent_size(), 4);
  EXPECT_EQ(c.transformer.grid_h, 4);
  EXPECT_EQ(c.transformer.n_points, 3);
  EXPECT_EQ(c.transformer.codebook_size, 64);
  EXPECT_DOUBLE_EQ(c.vq_adam.lr, 2e-3);
  EXPECT_DOUBLE_EQ(c.vq_adam.beta1, 0.5);
  EXPECT_DOUBLE_EQ(c.tr_adam.beta2, 0.95);

  const RunConfig again = parse_config(to_text(c));
  EXPECT_EQ(to_text(again), to_text(c));
  EXPECT_EQ(again.vq_digest(), c.vq_digest());
  EXPECT_EQ(again.transformer_digest(), c.transformer_digest());
  EXPECT_NE(c.vq_digest(), RunConfig().vq_digest());
}

TEST(Config, Errors) {
  try {
    parse_config("seed = 1\nbogus = 3\n", "f.cfg");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("f.cfg:2"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("bogus"), std::string::npos);
  }
  EXPECT_THROW(parse_config("seed = 1\nseed = 2\n"), ConfigError);
  EXPECT_THROW(parse_config("seed = x\n"), ConfigError);
  EXPECT_THROW(parse_config("seed 1\n"), ConfigError);
  EXPECT_THROW(parse_config("tr_d_model = 30\ntr_heads = 4\n"), ConfigError);
  EXPECT_THROW(parse_config("stage = eval\n"), ConfigError);
  EXPECT_NO_THROW(parse_config("# comment only\n\n  seed = 3  # trailing\n"));
  EXPECT_THROW(load_config("/nonexistent/lar.cfg"), ConfigError);
}

TEST(Dataset, DeterministicAndIndexed) {
  const DataConfig dc = small_config().data;
  const SyntheticSample a = make_sample(5, 17, dc), b = make_sample(5, 17, dc), c = make_sample(5, 18, dc);
  EXPECT_EQ(a.condition, b.condition);
  EXPECT_EQ(a.target, b.target);
  EXPECT_EQ(a.mask, b.mask);
  EXPECT_FALSE(a.target == c.target);

  DataConfig many = dc;
  many.count = 40;
  const auto serial = gen_synthetic_dataset(5, many, 1);
  const auto parallel = gen_synthetic_dataset(5, many, 4);
  for (int i = 0; i < 40; ++i) {
    EXPECT_EQ(serial[i].target, parallel[i].target);
    EXPECT_EQ(serial[i].mask, parallel[i].mask);
  }
  EXPECT_EQ(serial[17].target, a.target);
}

TEST(Dataset, MaskCoversGlyphsAndBackgroundAgrees) {
  const DataConfig dc;
  for (int i = 0; i < 200; ++i) {
    const SyntheticSample s = make_sample(3, i, dc);
    for (const Box& b : {s.source, s.pose})
      for (int y = b.y; y < b.y + b.size; ++y)
        for (int x = b.x; x < b.x + b.size; ++x) ASSERT_TRUE(s.mask(y, x)) << "sample " << i;
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < dc.image_size; ++y)
        for (int x = 0; x < dc.image_size; ++x)
          if (!s.mask(y, x)) ASSERT_EQ(s.condition.at(c, y, x), s.target.at(c, y, x));
    ASSERT_EQ(static_cast<int>(s.landmarks.size()), dc.n_landmarks);
    for (const auto& p : s.landmarks) {
      EXPECT_GE(p.x, 0.0);
      EXPECT_LE(p.x, 1.0);
    }
  }
}

TEST(Dataset, MeanMaskRateInBand) {
  DataConfig dc;
  dc.count = 1000;
  const auto data = gen_synthetic_dataset(1, dc, 2);
  double rate = 0.0;
  for (const auto& s : data) rate += s.mask.rate();
  rate /= 1000.0;
  EXPECT_GT(rate, 0.10);
  EXPECT_LT(rate, 0.40);
}

TEST(ImageIo, PpmPgmTokenRoundTrips) {
  TempDir dir;
  Rng rng(1);
  const Image img = quantize_8bit(random_image(rng, 3, 5, 7));
  write_ppm(dir.path() / "a.ppm", img);
  EXPECT_EQ(read_ppm(dir.path() / "a.ppm"), img);
  EXPECT_EQ(quantize_8bit(img), img);

  masks::PixelMask m(6, 4);
  for (int i = 0; i < 24; i += 3) m.set(i);
  write_pgm(dir.path() / "m.pgm", m);
  EXPECT_EQ(read_pgm(dir.path() / "m.pgm"), m);

  {
    std::ofstream out(dir.path() / "t.pgm", std::ios::binary);
    out << "P5\n# threshold\n3 1\n255\n";
    out.put(static_cast<char>(127)).put(static_cast<char>(128)).put(static_cast<char>(255));
  }
  const masks::PixelMask t = read_pgm(dir.path() / "t.pgm");
  EXPECT_FALSE(t(0, 0));
  EXPECT_TRUE(t(0, 1));
  EXPECT_TRUE(t(0, 2));

  const std::vector<int> ids{3, 0, 63, 7, 12, 5};
  write_token_grid(dir.path() / "t.txt", ids, 2, 3);
  int h = 0, w = 0;
  EXPECT_EQ(read_token_grid(dir.path() / "t.txt", h, w), ids);
  EXPECT_EQ(h, 2);
  EXPECT_EQ(w, 3);

  EXPECT_THROW(read_ppm(dir.path() / "missing.ppm"), DataError);
  EXPECT_THROW(read_ppm(dir.path() / "m.pgm"), DataError);
}

TEST(ImageIo, ModelRangeMapping) {
  Image img(1, 1, 3);
  img.values = {0.0, 0.5, 1.0};
  const Tensor t = to_model(img);
  EXPECT_EQ(t.data()[0], -1.0);
  EXPECT_EQ(t.data()[1], 0.0);
  EXPECT_EQ(t.data()[2], 1.0);
  EXPECT_EQ(from_model(t), img);
  EXPECT_EQ(from_model(Tensor({1, 1, 2}, {-3.0, 2.0})).values, (std::vector<double>{0.0, 1.0}));
}

TEST(Checkpoint, ByteExactRoundTrip) {
  TempDir dir;
  const RunConfig c = small_config();
  const tsvq::VqModel model(c.vq, 4);
  const ParamList params = model.parameters();
  round_to_f32(params);
  AdamState opt;
  opt.step = 7;
  for (const auto& p : params) {
    opt.first_moment.emplace_back(p.tensor.numel(), 0.125);
    opt.second_moment.emplace_back(p.tensor.numel(), 1.0 / 3.0);
  }
  const Checkpoint ckpt = make_checkpoint(params, c.vq_digest(), 7, &opt);
  save_checkpoint(dir.path() / "a.ckpt", ckpt);
  const Checkpoint loaded = load_checkpoint(dir.path() / "a.ckpt");
  save_checkpoint(dir.path() / "b.ckpt", loaded);
  EXPECT_EQ(file_bytes(dir.path() / "a.ckpt"), file_bytes(dir.path() / "b.ckpt"));
  EXPECT_EQ(serialize(deserialize(serialize(ckpt))), serialize(ckpt));
  ASSERT_TRUE(loaded.optimizer);
  EXPECT_EQ(loaded.optimizer->step, 7);
  EXPECT_EQ(loaded.optimizer->second_moment[0][0], 1.0 / 3.0);

  const tsvq::VqModel other(c.vq, 5);
  EXPECT_FALSE(params_equal(other.parameters(), params));
  apply_checkpoint(loaded, other.parameters(), c.vq_digest());
  EXPECT_TRUE(params_equal(other.parameters(), params));
}

TEST(Checkpoint, Rejections) {
  const RunConfig c = small_config();
  const tsvq::VqModel model(c.vq, 4);
  const Checkpoint ckpt = make_checkpoint(model.parameters(), c.vq_digest(), 0);
  EXPECT_THROW(apply_checkpoint(ckpt, model.parameters(), c.vq_digest() + 1), ConfigError);

  Checkpoint missing = ckpt;
  missing.params.pop_back();
  EXPECT_THROW(apply_checkpoint(missing, model.parameters(), c.vq_digest()), DataError);

  auto bytes = serialize(ckpt);
  bytes.push_back(0);
  EXPECT_THROW(deserialize(bytes), DataError);
  bytes = serialize(ckpt);
  bytes[0] = 'X';
  EXPECT_THROW(deserialize(bytes), DataError);
  bytes = serialize(ckpt);
  bytes.resize(bytes.size() / 2);
  EXPECT_THROW(deserialize(bytes), DataError);
}

TEST(TrainVq, ReconstructionErrorFallsEveryFiftySteps) {
  TempDir dir;
  const RunConfig c = small_config();
  const auto data = gen_synthetic_dataset(c.seed, c.data);
  std::vector<double> mae{vq_reconstruction_mae(tsvq::VqModel(c.vq, c.seed), data)};
  std::optional<fs::path> resume;
  for (int stop = 50; stop <= 200; stop += 50) {
    TrainOptions opt;
    opt.out_dir = dir.path();
    opt.resume = resume;
    opt.stop_after = stop;
    const VqTrainResult r = train_vq(c, data, opt);
    EXPECT_EQ(r.steps_done, stop);
    mae.push_back(vq_reconstruction_mae(r.model, data));
    resume = dir.path() / c.vq_checkpoint;
  }
  for (std::size_t i = 1; i < mae.size(); ++i) EXPECT_LT(mae[i], mae[i - 1]) << "window ending at step " << 50 * i;
}

TEST(TrainVq, ResumeIsBitExact) {
  TempDir dir;
  RunConfig c = small_config();
  c.vq_pretrain_steps = 4;
  c.vq_finetune_steps = 4;
  const auto data = gen_synthetic_dataset(c.seed, c.data);
  const VqTrainResult straight = train_vq(c, data);

  TrainOptions first;
  first.out_dir = dir.path();
  first.stop_after = 5;
  train_vq(c, data, first);
  TrainOptions second;
  second.resume = dir.path() / c.vq_checkpoint;
  const VqTrainResult resumed = train_vq(c, data, second);
  EXPECT_EQ(resumed.steps_done, 8);
  EXPECT_TRUE(params_equal(resumed.model.parameters(), straight.model.parameters()));
  EXPECT_EQ(resumed.optimizer.first_moment, straight.optimizer.first_moment);
  EXPECT_EQ(resumed.history.back().loss, straight.history.back().loss);
}

TEST(TrainVq, NonFiniteStepWritesLastGood) {
  TempDir dir;
  RunConfig c = small_config();
  c.vq_pretrain_steps = 6;
  c.vq_finetune_steps = 0;
  const auto data = gen_synthetic_dataset(c.seed, c.data);
  TrainOptions opt;
  opt.out_dir = dir.path();
  opt.before_step = [](int step, const ParamList& params) {
    if (step == 3) {
      Tensor t = params.front().tensor;
      t.data()[0] = std::numeric_limits<double>::quiet_NaN();
    }
  };
  EXPECT_THROW(train_vq(c, data, opt), TrainingError);
  const fs::path last = dir.path() / "vq_last_good.ckpt";
  ASSERT_TRUE(fs::exists(last));
  const Checkpoint ckpt = load_checkpoint(last);
  EXPECT_EQ(ckpt.step, 3);

  TrainOptions three;
  three.stop_after = 3;
  const VqTrainResult ref = train_vq(c, data, three);
  tsvq::VqModel restored(c.vq, 0);
  apply_checkpoint(ckpt, restored.parameters(), c.vq_digest());
  EXPECT_TRUE(params_equal(restored.parameters(), ref.model.parameters()));
}

TEST(TrainVq, LearningRateHalves) {
  RunConfig c = small_config();
  c.vq_decay_every = 10;
  EXPECT_DOUBLE_EQ(vq_learning_rate(c, 9), c.vq_adam.lr);
  EXPECT_DOUBLE_EQ(vq_learning_rate(c, 10), c.vq_adam.lr / 2);
  EXPECT_DOUBLE_EQ(vq_learning_rate(c, 35), c.vq_adam.lr / 8);
}

TEST(TrainTransformer, ScheduleShape) {
  RunConfig c = small_config();
  c.tr_steps = 100;
  c.tr_warmup = 10;
  EXPECT_DOUBLE_EQ(transformer_learning_rate(c, 0), c.tr_adam.lr / 10);
  EXPECT_DOUBLE_EQ(transformer_learning_rate(c, 9), c.tr_adam.lr);
  EXPECT_DOUBLE_EQ(transformer_learning_rate(c, 55), c.tr_adam.lr / 2);
  EXPECT_DOUBLE_EQ(transformer_learning_rate(c, 100), 0.0);
}

TEST(TrainTransformer, InitialNllNearUniformAndResume) {
  TempDir dir;
  RunConfig c = small_config();
  c.tr_steps = 6;
  c.tr_warmup = 2;
  auto data = gen_synthetic_dataset(c.seed, c.data);
  const tsvq::VqModel vq(c.vq, c.seed);
  // One sample with nothing to learn is skipped.
  data[3].mask = masks::PixelMask(16, 16);

  const TransformerTrainResult straight = train_transformer(c, vq, data);
  EXPECT_EQ(straight.skipped, 1);
  EXPECT_NEAR(straight.initial_nll, std::log(64.0), 0.1 * std::log(64.0));
  EXPECT_TRUE(std::isfinite(straight.final_nll));

  TrainOptions first;
  first.out_dir = dir.path();
  first.stop_after = 3;
  train_transformer(c, vq, data, first);
  TrainOptions second;
  second.resume = dir.path() / c.transformer_checkpoint;
  const TransformerTrainResult resumed = train_transformer(c, vq, data, second);
  EXPECT_TRUE(params_equal(resumed.model.parameters(), straight.model.parameters()));
  EXPECT_EQ(resumed.final_nll, straight.final_nll);

  RunConfig wrong = c;
  wrong.transformer.d_model = 32;
  wrong.transformer.d_ff = 64;
  EXPECT_THROW(load_transformer(wrong, dir.path() / c.transformer_checkpoint), ConfigError);
}

TEST(TrainTransformer, NonFiniteStepWritesLastGood) {
  TempDir dir;
  RunConfig c = small_config();
  c.tr_steps = 4;
  const auto data = gen_synthetic_dataset(c.seed, c.data);
  const tsvq::VqModel vq(c.vq, c.seed);
  TrainOptions opt;
  opt.out_dir = dir.path();
  opt.before_step = [](int step, const ParamList& params) {
    if (step == 2) {
      Tensor t = params[0].tensor;
      for (double& v : t.data()) v = std::numeric_limits<double>::infinity();
    }
  };
  EXPECT_THROW(train_transformer(c, vq, data, opt), TrainingError);
  EXPECT_EQ(load_checkpoint(dir.path() / "transformer_last_good.ckpt").step, 2);
}

TEST(Tokenize, UnmaskedTargetTokensIgnoreMaskedPixels) {
  const RunConfig c = small_config();
  const tsvq::VqModel vq(c.vq, c.seed);
  SyntheticSample s = make_sample(c.seed, 0, c.data);
  const TokenizedSample a = tokenize(vq, s);
  for (int ch = 0; ch < 3; ++ch)
    for (int p = 0; p < 256; ++p)
      if (s.mask.at(p)) s.target.values[ch * 256 + p] = 1.0 - s.target.values[ch * 256 + p];
  const TokenizedSample b = tokenize(vq, s);
  for (int j = 0; j < 16; ++j)
    if (!a.mq.at(j)) EXPECT_EQ(a.target_ids[j], b.target_ids[j]);
  EXPECT_EQ(a.mq, vq.latent_mask(s.mask));
}

TEST(Inference, ZeroMaskEqualsReconstruction) {
  const RunConfig c = small_config();
  const tsvq::VqModel vq(c.vq, 1);
  const transformer::LaTransformer model(c.transformer, 2);
  const SyntheticSample s = make_sample(c.seed, 1, c.data);
  const InferenceInput in{s.target, masks::PixelMask(16, 16), s.condition, s.landmarks};
  const InferenceResult r = run_inference(vq, model, in, c.sampler);
  EXPECT_EQ(r.steps, 0);
  EXPECT_EQ(r.output, reconstruct(vq, s.target));
}

TEST(Inference, LatentTapAndDeterminism) {
  const RunConfig c = small_config();
  const tsvq::VqModel vq(c.vq, 1);
  const transformer::LaTransformer model(c.transformer, 2);
  for (int i = 0; i < 4; ++i) {
    const SyntheticSample s = make_sample(c.seed, i, c.data);
    const InferenceInput in{s.target, s.mask, s.condition, s.landmarks};
    const InferenceResult a = run_inference(vq, model, in, c.sampler);
    const InferenceResult b = run_inference(vq, model, in, c.sampler);
    EXPECT_EQ(a.output, b.output);
    EXPECT_EQ(a.tokens, b.tokens);
    EXPECT_EQ(a.steps, a.mq.count());

    const Tensor zhat = vq.encode(to_model(s.target), s.mask);
    const int cells = a.mq.size();
    for (int ch = 0; ch < zhat.dim(0); ++ch)
      for (int p = 0; p < cells; ++p) {
        const double tap = a.decoder_input.data()[ch * cells + p];
        if (a.mq.at(p)) {
          EXPECT_EQ(tap, vq.codebook().vectors.data()[a.tokens[p] * zhat.dim(0) + ch]);
        } else {
          EXPECT_EQ(tap, zhat.data()[ch * cells + p]);
        }
      }
  }
}

TEST(Inference, GeometryMismatch) {
  const RunConfig c = small_config();
  const tsvq::VqModel vq(c.vq, 1);
  const transformer::LaTransformer model(c.transformer, 2);
  const SyntheticSample s = make_sample(c.seed, 1, c.data);
  EXPECT_THROW(run_inference(vq, model, {s.target, masks::PixelMask(8, 8), s.condition, s.landmarks}, c.sampler),
               ConfigError);
  EXPECT_THROW(run_inference(vq, model, {Image(3, 8, 8), s.mask, s.condition, s.landmarks}, c.sampler), ConfigError);
}

TEST(Benchmark, TokenCounts) {
  for (double rate : {0.0, 0.0625, 0.1, 0.25, 0.5, 1.0}) {
    const masks::QuantMask m = random_latent_mask(8, 8, rate, 3);
    EXPECT_EQ(m.count(), static_cast<int>(std::ceil(rate * 64 - 1e-9))) << rate;
  }
  transformer::TransformerConfig tc;
  tc.depth = 1;
  tc.d_model = 16;
  tc.heads = 2;
  tc.d_ff = 16;
  const transformer::LaTransformer model(tc, 1);
  const BenchmarkReport r = benchmark(model, {0.0, 0.25, 0.5}, 4);
  ASSERT_EQ(r.rows.size(), 3u);
  EXPECT_EQ(r.threads, 1);
  EXPECT_EQ(r.rows[0].local_tokens, 0);
  EXPECT_EQ(r.rows[1].local_tokens, 16);
  EXPECT_EQ(r.rows[2].local_tokens, 32);
  for (const auto& row : r.rows) EXPECT_EQ(row.full_tokens, 64);
  EXPECT_NE(r.describe().find("speedup"), std::string::npos);
}

namespace {

// Straightforward SSIM over valid 11x11 windows with a separately built window.
double ssim_oracle(const std::vector<double>& a, const std::vector<double>& b, int h, int w) {
  double win[11][11], total_w = 0.0;
  for (int y = 0; y < 11; ++y)
    for (int x = 0; x < 11; ++x) total_w += win[y][x] = std::exp(-((y - 5) * (y - 5) + (x - 5) * (x - 5)) / 4.5);
  const double c1 = 1e-4, c2 = 9e-4;
  double sum = 0.0;
  int n = 0;
  for (int i = 0; i + 11 <= h; ++i)
    for (int j = 0; j + 11 <= w; ++j) {
      double ma = 0, mb = 0;
      for (int y = 0; y < 11; ++y)
        for (int x = 0; x < 11; ++x) {
          ma += win[y][x] / total_w * a[(i + y) * w + j + x];
          mb += win[y][x] / total_w * b[(i + y) * w + j + x];
        }
      double va = 0, vb = 0, cv = 0;
      for (int y = 0; y < 11; ++y)
        for (int x = 0; x < 11; ++x) {
          const double da = a[(i + y) * w + j + x] - ma, db = b[(i + y) * w + j + x] - mb, k = win[y][x] / total_w;
          va += k * da * da;
          vb += k * db * db;
          cv += k * da * db;
        }
      sum += (2 * ma * mb + c1) * (2 * cv + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
      ++n;
    }
  return sum / n;
}

}  // namespace

TEST(Metrics, TrivialCases) {
  Rng rng(1);
  const Image a = random_image(rng, 3, 16, 16);
  const ImageMetrics same = compute_metrics(a, a);
  EXPECT_EQ(same.mae, 0.0);
  EXPECT_EQ(same.ssim, 1.0);
  EXPECT_TRUE(std::isinf(same.psnr) && same.psnr > 0);

  Image b(3, 16, 16, 0.2), shifted(3, 16, 16, 0.3);
  const ImageMetrics m = compute_metrics(shifted, b);
  EXPECT_NEAR(m.mae, 0.1, 1e-15);
  EXPECT_NEAR(m.psnr, 20.0, 1e-12);
  EXPECT_THROW(compute_metrics(a, Image(3, 16, 15)), DataError);
}

TEST(Metrics, MatchDirectFormulas) {
  Rng rng(2);
  for (int trial = 0; trial < 10; ++trial) {
    const int h = 11 + rng.uniform_int(10), w = 11 + rng.uniform_int(10);
    const Image a = random_image(rng, 3, h, w);
    Image b = a;
    for (double& v : b.values) v = std::clamp(v + 0.2 * (rng.uniform() - 0.5), 0.0, 1.0);
    double abs_sum = 0.0, sq_sum = 0.0;
    for (std::size_t i = 0; i < a.values.size(); ++i) {
      abs_sum += std::abs(a.values[i] - b.values[i]);
      sq_sum += (a.values[i] - b.values[i]) * (a.values[i] - b.values[i]);
    }
    const double n = static_cast<double>(a.values.size());
    double ssim_ref = 0.0;
    for (int c = 0; c < 3; ++c) {
      const std::vector<double> pa(a.values.begin() + c * h * w, a.values.begin() + (c + 1) * h * w);
      const std::vector<double> pb(b.values.begin() + c * h * w, b.values.begin() + (c + 1) * h * w);
      ssim_ref += ssim_oracle(pa, pb, h, w) / 3.0;
    }
    const ImageMetrics m = compute_metrics(a, b);
    EXPECT_NEAR(m.mae, abs_sum / n, 1e-9);
    EXPECT_NEAR(m.psnr, 10.0 * std::log10(1.0 / (sq_sum / n)), 1e-9);
    EXPECT_NEAR(m.ssim, ssim_ref, 1e-9);
  }
}

TEST(Metrics, FloatInstantiation) {
  Plane<float> a = Plane<float>::Constant(12, 12, 0.5f), b = a;
  b(3, 4) = 0.25f;
  EXPECT_EQ(ssim(a, a), 1.0f);
  EXPECT_LT(ssim(a, b), 1.0f);
  EXPECT_FLOAT_EQ(mean_absolute_error(a, b), 0.25f / 144);
}
