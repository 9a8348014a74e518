// Command-line front end: data generation, both training stages, inference,
// benchmarking and the mask / gradient verifiers.

#include "lar/error.hpp"
#include "lar/masks/masks.hpp"
#include "lar/pipeline/checkpoint.hpp"
#include "lar/pipeline/config.hpp"
#include "lar/pipeline/dataset.hpp"
#include "lar/pipeline/grad_suite.hpp"
#include "lar/pipeline/image_io.hpp"
#include "lar/pipeline/inference.hpp"
#include "lar/pipeline/metrics.hpp"
#include "lar/pipeline/train.hpp"

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>

namespace fs = std::filesystem;
using namespace lar;
using namespace lar::pipeline;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitValidation = 1;
constexpr int kExitRuntime = 2;
constexpr const char* kThreadsEnv = "LAR_NUM_THREADS";

struct Common {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out = ".";
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config_path, "key=value run configuration (defaults when omitted)");
  cmd->add_option("--seed", c.seed, "overrides the configured seed");
  cmd->add_option("--out", c.out, "output directory")->capture_default_str();
}

RunConfig load(const Common& c) {
  RunConfig config = c.config_path.empty() ? RunConfig{} : load_config(c.config_path);
  if (c.seed) config.seed = *c.seed;
  config.finalize();
  config.validate();
  fs::create_directories(c.out);
  return config;
}

int thread_count() {
  const char* env = std::getenv(kThreadsEnv);
  if (!env || !*env) return 1;
  char* end = nullptr;
  const long n = std::strtol(env, &end, 10);
  if (*end != '\0' || n < 1 || n > 1024) throw ConfigError(std::string(kThreadsEnv) + " must be a positive integer");
  return static_cast<int>(n);
}

std::string sample_stem(int index) {
  std::ostringstream s;
  s << std::setw(4) << std::setfill('0') << index;
  return s.str();
}

void write_landmarks(const fs::path& path, const std::vector<transformer::Landmark>& points) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << std::setprecision(17);
  for (const auto& p : points) out << p.x << " " << p.y << " " << p.visible << "\n";
}

std::vector<transformer::Landmark> read_landmarks(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  std::vector<transformer::Landmark> points;
  transformer::Landmark p;
  while (in >> p.x >> p.y >> p.visible) points.push_back(p);
  if (!in.eof()) throw DataError(path.string() + ": expected 'x y visible' per line");
  return points;
}

int cmd_gen_data(const Common& c) {
  const RunConfig config = load(c);
  const auto data = gen_synthetic_dataset(config.seed, config.data, thread_count());
  const fs::path dir = fs::path(c.out) / "data";
  fs::create_directories(dir);
  double rate = 0.0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const std::string stem = sample_stem(static_cast<int>(i));
    write_ppm(dir / (stem + "_condition.ppm"), data[i].condition);
    write_ppm(dir / (stem + "_target.ppm"), data[i].target);
    write_pgm(dir / (stem + "_mask.pgm"), data[i].mask);
    write_landmarks(dir / (stem + "_landmarks.txt"), data[i].landmarks);
    rate += data[i].mask.rate();
  }
  std::cout << "wrote " << data.size() << " samples to " << dir.string() << ", mean mask rate "
            << rate / static_cast<double>(data.size()) << "\n";
  return kExitOk;
}

int cmd_train_vq(const Common& c, const std::string& resume) {
  const RunConfig config = load(c);
  const auto data = gen_synthetic_dataset(config.seed, config.data, thread_count());
  std::ofstream log(fs::path(c.out) / "vq_log.txt");
  TrainOptions options;
  options.out_dir = c.out;
  options.log = &log;
  if (!resume.empty()) options.resume = resume;
  const VqTrainResult result = train_vq(config, data, options);
  std::cout << "vq: " << result.steps_done << " steps, reconstruction MAE " << vq_reconstruction_mae(result.model, data)
            << ", checkpoint " << resolve(c.out, config.vq_checkpoint).string() << "\n";
  return kExitOk;
}

int cmd_train_transformer(const Common& c, const std::string& vq_path, const std::string& resume) {
  const RunConfig config = load(c);
  const auto vq = load_vq(config, vq_path.empty() ? resolve(c.out, config.vq_checkpoint) : fs::path(vq_path));
  const auto data = gen_synthetic_dataset(config.seed, config.data, thread_count());
  std::ofstream log(fs::path(c.out) / "transformer_log.txt");
  TrainOptions options;
  options.out_dir = c.out;
  options.log = &log;
  if (!resume.empty()) options.resume = resume;
  const TransformerTrainResult result = train_transformer(config, vq, data, options);
  std::cout << "transformer: " << result.steps_done << " steps, masked NLL " << result.initial_nll << " -> "
            << result.final_nll << ", skipped " << result.skipped << " samples, checkpoint "
            << resolve(c.out, config.transformer_checkpoint).string() << "\n";
  return kExitOk;
}

struct InferArgs {
  std::string vq;
  std::string transformer;
  int sample = -1;
  std::string reference;
  std::string mask;
  std::string condition;
  std::string landmarks;
  std::string truth;
};

int cmd_infer(const Common& c, const InferArgs& a) {
  const RunConfig config = load(c);
  const auto vq = load_vq(config, a.vq.empty() ? resolve(c.out, config.vq_checkpoint) : fs::path(a.vq));
  const auto model = load_transformer(
      config, a.transformer.empty() ? resolve(c.out, config.transformer_checkpoint) : fs::path(a.transformer));

  InferenceInput input;
  std::optional<Image> truth;
  if (a.sample >= 0) {
    const SyntheticSample s = make_sample(config.seed, a.sample, config.data);
    input = {s.target, s.mask, s.condition, s.landmarks};
    truth = s.target;
  } else {
    if (a.reference.empty() || a.mask.empty() || a.condition.empty()) {
      throw ConfigError("infer: give --sample or all of --reference, --mask and --condition");
    }
    input.reference = read_ppm(a.reference);
    input.mask = read_pgm(a.mask);
    input.condition = read_ppm(a.condition);
    if (!a.landmarks.empty()) input.points = read_landmarks(a.landmarks);
    if (!a.truth.empty()) truth = read_ppm(a.truth);
  }

  const InferenceResult result = run_inference(vq, model, input, config.sampler);
  const fs::path out(c.out);
  write_ppm(out / "output.ppm", result.output);
  write_token_grid(out / "tokens.txt", result.tokens, result.mq.height(), result.mq.width());
  std::cout << "generated " << result.steps << " of " << result.tokens.size() << " tokens; wrote "
            << (out / "output.ppm").string() << "\n";
  if (truth) {
    const ImageMetrics m = compute_metrics(result.output, *truth);
    std::cout << "psnr " << m.psnr << " ssim " << m.ssim << " mae " << m.mae << "\n";
  }
  return kExitOk;
}

int cmd_benchmark(const Common& c, const std::string& transformer_path, const std::vector<double>& rates, int repeats) {
  const RunConfig config = load(c);
  transformer::LaTransformer model(config.transformer, config.seed);
  const fs::path ckpt = transformer_path.empty() ? resolve(c.out, config.transformer_checkpoint) : fs::path(transformer_path);
  if (fs::exists(ckpt)) {
    model = load_transformer(config, ckpt);
  } else {
    std::cerr << "note: " << ckpt.string() << " not found; timing an untrained model\n";
  }
  const BenchmarkReport report = benchmark(model, rates, config.seed, repeats);
  std::cout << report.describe();
  return kExitOk;
}

masks::QuantMask read_latent_mask(const fs::path& path, int h, int w) {
  std::ifstream probe(path, std::ios::binary);
  if (!probe) throw DataError("cannot open " + path.string());
  char magic[2] = {};
  probe.read(magic, 2);
  masks::QuantMask mq(h, w);
  if (magic[0] == 'P' && magic[1] == '5') {
    const masks::PixelMask pm = read_pgm(path);
    if (pm.height() != h || pm.width() != w) throw ConfigError("mask file is not " + std::to_string(h) + "x" + std::to_string(w));
    return pm.retag<masks::LatentTag>();
  }
  std::ifstream in(path);
  for (int i = 0; i < h * w; ++i) {
    int bit = 0;
    if (!(in >> bit) || (bit != 0 && bit != 1)) throw DataError(path.string() + ": expected " + std::to_string(h * w) + " 0/1 entries");
    mq.set(i, bit == 1);
  }
  int extra = 0;
  if (in >> extra) throw DataError(path.string() + ": more than " + std::to_string(h * w) + " entries");
  return mq;
}

int cmd_verify_masks(const std::string& grid, const std::string& mask_path, int layers, const std::string& variant_name) {
  int h = 0;
  int w = 0;
  char sep = 0;
  std::istringstream gs(grid);
  if (!(gs >> h >> sep >> w) || (sep != 'x' && sep != 'X') || h < 1 || w < 1) {
    throw ConfigError("--grid must look like HxW, got '" + grid + "'");
  }
  if (layers < 1) throw ConfigError("--layers must be positive");
  const masks::LaVariant variant = masks::parse_la_variant(variant_name);
  const masks::QuantMask mq = read_latent_mask(mask_path, h, w);
  const masks::TokenGrouping g = masks::group_tokens(mq, 1 + h * w);
  const masks::AttnMask mask = masks::build_la_mask(g, variant);
  const masks::CausalityReport report = masks::verify_causality(mask, g, layers);
  std::cout << "grid " << h << "x" << w << ", masked " << mq.count() << ", variant " << masks::to_string(variant)
            << ", layers " << layers << "\n"
            << report.describe(g);
  return report.pass ? kExitOk : kExitValidation;
}

int cmd_grad_check(std::uint64_t seed, double eps, double tolerance) {
  bool ok = true;
  for (const GradCase& gc : run_grad_suite(seed, eps)) {
    const bool pass = gc.report.max_rel_error < tolerance;
    ok = ok && pass;
    std::cout << (pass ? "PASS " : "FAIL ") << std::left << std::setw(34) << gc.name << " max rel error "
              << std::scientific << std::setprecision(3) << gc.report.max_rel_error << " over "
              << gc.report.elements_checked << " elements\n"
              << std::defaultfloat;
  }
  return ok ? kExitOk : kExitValidation;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Local autoregressive masked generation over a two-stream VQ autoencoder"};
  app.require_subcommand(1);
  app.footer(std::string("Environment: ") + kThreadsEnv +
             " sets the worker count for data generation (default 1). Training and benchmarks run on one thread.\n"
             "Exit codes: 0 success, 1 validation failure, 2 runtime error.");

  Common common;
  auto* gen = app.add_subcommand("gen-data", "write the synthetic dataset as PPM/PGM files");
  add_common(gen, common);

  std::string resume;
  auto* tvq = app.add_subcommand("train-vq", "train the two-stream VQ autoencoder");
  add_common(tvq, common);
  tvq->add_option("--resume", resume, "checkpoint to continue from");

  std::string vq_path;
  auto* ttr = app.add_subcommand("train-transformer", "train the transformer on frozen VQ tokens");
  add_common(ttr, common);
  ttr->add_option("--vq", vq_path, "VQ checkpoint (default: <out>/<vq_checkpoint>)");
  ttr->add_option("--resume", resume, "checkpoint to continue from");

  InferArgs infer;
  auto* inf = app.add_subcommand("infer", "regenerate the masked region of an image");
  add_common(inf, common);
  inf->add_option("--vq", infer.vq, "VQ checkpoint");
  inf->add_option("--transformer", infer.transformer, "transformer checkpoint");
  inf->add_option("--sample", infer.sample, "use synthetic sample N as input");
  inf->add_option("--reference", infer.reference, "reference image (PPM)");
  inf->add_option("--mask", infer.mask, "mask (PGM, >= 128 is masked)");
  inf->add_option("--condition", infer.condition, "guidance image (PPM)");
  inf->add_option("--landmarks", infer.landmarks, "guidance landmarks, 'x y visible' per line");
  inf->add_option("--truth", infer.truth, "ground truth (PPM) for PSNR/SSIM/MAE");

  std::string bench_ckpt;
  std::vector<double> rates{0.0625, 0.25, 0.5};
  int repeats = 1;
  auto* bench = app.add_subcommand("benchmark", "time full versus local autoregressive sampling");
  add_common(bench, common);
  bench->add_option("--transformer", bench_ckpt, "transformer checkpoint (untrained model if absent)");
  bench->add_option("--rates", rates, "latent mask rates")->delimiter(',')->capture_default_str();
  bench->add_option("--repeats", repeats, "timed runs per rate")->capture_default_str();

  std::string grid;
  std::string mask_file;
  int layers = 0;
  std::string variant = "safe";
  auto* vm = app.add_subcommand(
      "verify-masks",
      "check that no masked token reaches its own or an earlier predictor row within N attention layers.\n"
      "The mask file holds H*W 0/1 entries in raster order, or an HxW PGM.\n"
      "Variants: 'safe' (global rows see global columns only) and 'literal' (global rows also see\n"
      "unmasked causal columns, which leaks over three hops). The extended alternative mask that\n"
      "adds per-step global context is hard to evaluate in one parallel pass and is not constructed.");
  vm->add_option("--grid", grid, "latent grid HxW")->required();
  vm->add_option("--mask", mask_file, "latent mask file")->required();
  vm->add_option("--layers", layers, "attention depth to verify")->required();
  vm->add_option("--variant", variant, "safe or literal")->capture_default_str();

  std::uint64_t gc_seed = 0;
  double gc_eps = 1e-5;
  double gc_tol = 1e-5;
  auto* gc = app.add_subcommand("grad-check", "finite-difference check of every differentiable op family");
  gc->add_option("--seed", gc_seed, "input seed")->capture_default_str();
  gc->add_option("--eps", gc_eps, "central difference step")->capture_default_str();
  gc->add_option("--tolerance", gc_tol, "maximum relative error")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitValidation;
  }

  try {
    if (*gen) return cmd_gen_data(common);
    if (*tvq) return cmd_train_vq(common, resume);
    if (*ttr) return cmd_train_transformer(common, vq_path, resume);
    if (*inf) return cmd_infer(common, infer);
    if (*bench) return cmd_benchmark(common, bench_ckpt, rates, repeats);
    if (*vm) return cmd_verify_masks(grid, mask_file, layers, variant);
    if (*gc) return cmd_grad_check(gc_seed, gc_eps, gc_tol);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const InvalidMaskError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitRuntime;
}
