#include "lar/pipeline/train.hpp"

#include "lar/error.hpp"
#include "lar/numerics/ops.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <iostream>

namespace lar::pipeline {

namespace {

constexpr std::uint64_t kVqBatchStream = 0x5651;
constexpr std::uint64_t kTrBatchStream = 0x7452;
constexpr int kEvalSamples = 32;

std::vector<Tensor> tensors_of(const ParamList& params) {
  std::vector<Tensor> out;
  out.reserve(params.size());
  for (const auto& p : params) out.push_back(p.tensor);
  return out;
}

void zero_grads(std::vector<Tensor>& params) {
  for (Tensor& p : params) p.zero_grad();
}

void write_log(std::ostream* log, const StepLog& s) {
  if (!log) return;
  *log << s.phase << " step " << s.step << " lr " << std::setprecision(6) << s.lr << " loss " << std::setprecision(8)
       << s.loss;
  if (s.phase != "transformer") *log << " recon " << s.recon;
  *log << "\n";
}

/// Runs one optimizer step; a NaN surfacing anywhere in the step becomes
/// TrainingError.
template <class Fn>
void guarded(Fn&& fn) {
  try {
    fn();
  } catch (const DataError& e) {
    throw TrainingError(std::string("non-finite values during step: ") + e.what());
  } catch (const InvalidMaskError& e) {
    throw TrainingError(std::string("non-finite values during step: ") + e.what());
  }
}

void check_finite(double loss, int step) {
  if (!std::isfinite(loss)) throw TrainingError("non-finite loss " + std::to_string(loss) + " at step " + std::to_string(step));
}

}  // namespace

void round_to_f32(const ParamList& params) {
  for (const auto& p : params) {
    Tensor t = p.tensor;
    for (double& v : t.data()) v = static_cast<double>(static_cast<float>(v));
  }
}

double vq_learning_rate(const RunConfig& config, int step) {
  if (config.vq_decay_every == 0) return config.vq_adam.lr;
  return config.vq_adam.lr * std::pow(0.5, step / config.vq_decay_every);
}

VqTrainResult train_vq(const RunConfig& config, const std::vector<SyntheticSample>& data, const TrainOptions& options) {
  config.validate();
  if (data.empty()) throw DataError("train_vq: empty dataset");
  VqTrainResult result;
  result.model = tsvq::VqModel(config.vq, config.seed);
  const ParamList named = result.model.parameters();
  round_to_f32(named);
  std::vector<Tensor> params = tensors_of(named);
  const std::uint64_t digest = config.vq_digest();

  if (options.resume) {
    const Checkpoint ckpt = load_checkpoint(*options.resume);
    apply_checkpoint(ckpt, named, digest);
    if (ckpt.optimizer) result.optimizer = *ckpt.optimizer;
    result.steps_done = static_cast<int>(ckpt.step);
  }

  const int total = config.vq_pretrain_steps + config.vq_finetune_steps;
  const int stop = options.stop_after >= 0 ? std::min(total, options.stop_after) : total;
  const auto ckpt_path = options.out_dir.empty() ? std::filesystem::path() : resolve(options.out_dir, config.vq_checkpoint);
  Checkpoint last_good = make_checkpoint(named, digest, result.steps_done, &result.optimizer);
  const int pool = 2 * static_cast<int>(data.size());

  for (int step = result.steps_done; step < stop; ++step) {
    const bool pretrain = step < config.vq_pretrain_steps;
    StepLog entry{step, pretrain ? "vq-pretrain" : "vq-finetune", vq_learning_rate(config, step), 0.0, 0.0};
    try {
      if (options.before_step) options.before_step(step, named);
      guarded([&] {
        zero_grads(params);
        Rng rng = Rng::derive(config.seed ^ kVqBatchStream, static_cast<std::uint64_t>(step));
        const double weight = 1.0 / config.vq_batch;
        for (int b = 0; b < config.vq_batch; ++b) {
          // Even draws are targets, odd draws conditions; both share the mask.
          const int pick = rng.uniform_int(pool);
          const SyntheticSample& s = data[static_cast<std::size_t>(pick / 2)];
          const Tensor image = to_model(pick % 2 ? s.condition : s.target);
          const masks::PixelMask mask = pretrain ? masks::PixelMask(s.mask.height(), s.mask.width()) : s.mask;
          const masks::QuantMask mq = pretrain ? masks::QuantMask::ones(config.vq.latent_size(), config.vq.latent_size())
                                               : result.model.latent_mask(mask);
          const tsvq::LatentGrid grid = result.model.encode_quantized(image, mask);
          const tsvq::DecodeResult dec = tsvq::local_decode(grid.zq, grid.zhat, mq, result.model.decoder());
          const tsvq::VqLosses losses =
              tsvq::vq_losses(dec.image, image, grid.zhat, grid.zq, mq,
                              pretrain ? tsvq::VqPhase::kPretrain : tsvq::VqPhase::kFinetune, config.vq.commitment);
          check_finite(losses.total.item(), step);
          entry.loss += weight * losses.total.item();
          entry.recon += weight * losses.recon.item();
          scale(losses.total, weight).backward();
        }
        adam_step(params, result.optimizer, AdamConfig{entry.lr, config.vq_adam.beta1, config.vq_adam.beta2,
                                                       config.vq_adam.eps, config.vq_adam.weight_decay});
      });
    } catch (const TrainingError&) {
      if (!options.out_dir.empty()) save_checkpoint(resolve(options.out_dir, "vq_last_good.ckpt"), last_good);
      throw;
    }
    round_to_f32(named);
    result.steps_done = step + 1;
    last_good = make_checkpoint(named, digest, result.steps_done, &result.optimizer);
    result.history.push_back(entry);
    write_log(options.log, entry);
    if (options.on_step) options.on_step(entry);
    if (!ckpt_path.empty() && config.checkpoint_every > 0 && result.steps_done % config.checkpoint_every == 0) {
      save_checkpoint(ckpt_path, last_good);
    }
  }
  if (!ckpt_path.empty()) save_checkpoint(ckpt_path, last_good);
  return result;
}

double vq_reconstruction_mae(const tsvq::VqModel& model, const std::vector<SyntheticSample>& data) {
  if (data.empty()) throw DataError("vq_reconstruction_mae: empty dataset");
  NoGradGuard no_grad;
  double total = 0.0;
  for (const SyntheticSample& s : data) {
    const tsvq::LatentGrid grid = model.encode_quantized(to_model(s.target), s.mask);
    const auto dec = tsvq::local_decode(grid.zq, grid.zhat, model.latent_mask(s.mask), model.decoder());
    const Image out = from_model(dec.image);
    double err = 0.0;
    for (std::size_t i = 0; i < out.values.size(); ++i) err += std::abs(out.values[i] - s.target.values[i]);
    total += err / static_cast<double>(out.values.size());
  }
  return total / static_cast<double>(data.size());
}

tsvq::VqModel load_vq(const RunConfig& config, const std::filesystem::path& path) {
  tsvq::VqModel model(config.vq, config.seed);
  apply_checkpoint(load_checkpoint(path), model.parameters(), config.vq_digest());
  return model;
}

TokenizedSample tokenize(const tsvq::VqModel& vq, const SyntheticSample& sample) {
  NoGradGuard no_grad;
  TokenizedSample t;
  const masks::PixelMask empty(sample.mask.height(), sample.mask.width());
  t.cond_ids = vq.encode_quantized(to_model(sample.condition), empty).indices;
  t.target_ids = vq.encode_quantized(to_model(sample.target), sample.mask).indices;
  t.mq = vq.latent_mask(sample.mask);
  t.points = sample.landmarks;
  return t;
}

double transformer_learning_rate(const RunConfig& config, int step) {
  const double base = config.tr_adam.lr;
  if (step < config.tr_warmup) return base * (step + 1) / config.tr_warmup;
  const int decay = config.tr_steps - config.tr_warmup;
  if (decay <= 0) return base;
  return base * std::max(0.0, static_cast<double>(config.tr_steps - step) / decay);
}

double evaluate_nll(const transformer::LaTransformer& model, const std::vector<TokenizedSample>& samples) {
  if (samples.empty()) throw DataError("evaluate_nll: no samples");
  NoGradGuard no_grad;
  double total = 0.0;
  for (const TokenizedSample& s : samples) {
    const auto g = transformer::grouping_for(model.config(), s.mq, masks::GroupingUse::kTraining);
    const Tensor logits = model.forward(s.input(), masks::build_la_mask(g));
    total += transformer::masked_nll(logits, s.target_ids, g).item();
  }
  return total / static_cast<double>(samples.size());
}

TransformerTrainResult train_transformer(const RunConfig& config, const tsvq::VqModel& vq,
                                         const std::vector<SyntheticSample>& data, const TrainOptions& options) {
  config.validate();
  TransformerTrainResult result;
  std::vector<TokenizedSample> usable;
  for (std::size_t i = 0; i < data.size(); ++i) {
    TokenizedSample t = tokenize(vq, data[i]);
    if (!t.mq.any()) {
      ++result.skipped;
      std::cerr << "warning: sample " << i << " has an empty latent mask; skipped\n";
      continue;
    }
    usable.push_back(std::move(t));
  }
  if (usable.empty()) throw DataError("train_transformer: no sample has a masked latent cell");
  const std::vector<TokenizedSample> eval(usable.begin(),
                                          usable.begin() + std::min<std::size_t>(kEvalSamples, usable.size()));

  result.model = transformer::LaTransformer(config.transformer, config.seed);
  const ParamList named = result.model.parameters();
  round_to_f32(named);
  std::vector<Tensor> params = tensors_of(named);
  const std::uint64_t digest = config.transformer_digest();
  if (options.resume) {
    const Checkpoint ckpt = load_checkpoint(*options.resume);
    apply_checkpoint(ckpt, named, digest);
    if (ckpt.optimizer) result.optimizer = *ckpt.optimizer;
    result.steps_done = static_cast<int>(ckpt.step);
  }
  result.initial_nll = evaluate_nll(result.model, eval);

  const int stop = options.stop_after >= 0 ? std::min(config.tr_steps, options.stop_after) : config.tr_steps;
  const auto ckpt_path =
      options.out_dir.empty() ? std::filesystem::path() : resolve(options.out_dir, config.transformer_checkpoint);
  Checkpoint last_good = make_checkpoint(named, digest, result.steps_done, &result.optimizer);

  for (int step = result.steps_done; step < stop; ++step) {
    StepLog entry{step, "transformer", transformer_learning_rate(config, step), 0.0, 0.0};
    try {
      if (options.before_step) options.before_step(step, named);
      guarded([&] {
        zero_grads(params);
        Rng rng = Rng::derive(config.seed ^ kTrBatchStream, static_cast<std::uint64_t>(step));
        const double weight = 1.0 / config.tr_batch;
        for (int b = 0; b < config.tr_batch; ++b) {
          const TokenizedSample& s = usable[static_cast<std::size_t>(rng.uniform_int(static_cast<int>(usable.size())))];
          const auto g = transformer::grouping_for(config.transformer, s.mq, masks::GroupingUse::kTraining);
          const Tensor logits = result.model.forward(s.input(), masks::build_la_mask(g), {true, &rng});
          const Tensor loss = transformer::masked_nll(logits, s.target_ids, g);
          check_finite(loss.item(), step);
          entry.loss += weight * loss.item();
          scale(loss, weight).backward();
        }
        adam_step(params, result.optimizer, AdamConfig{entry.lr, config.tr_adam.beta1, config.tr_adam.beta2,
                                                       config.tr_adam.eps, config.tr_adam.weight_decay});
      });
    } catch (const TrainingError&) {
      if (!options.out_dir.empty()) save_checkpoint(resolve(options.out_dir, "transformer_last_good.ckpt"), last_good);
      throw;
    }
    round_to_f32(named);
    result.steps_done = step + 1;
    last_good = make_checkpoint(named, digest, result.steps_done, &result.optimizer);
    result.history.push_back(entry);
    write_log(options.log, entry);
    if (options.on_step) options.on_step(entry);
    if (!ckpt_path.empty() && config.checkpoint_every > 0 && result.steps_done % config.checkpoint_every == 0) {
      save_checkpoint(ckpt_path, last_good);
    }
  }
  if (!ckpt_path.empty()) save_checkpoint(ckpt_path, last_good);
  result.final_nll = evaluate_nll(result.model, eval);
  return result;
}

transformer::LaTransformer load_transformer(const RunConfig& config, const std::filesystem::path& path) {
  transformer::LaTransformer model(config.transformer, config.seed);
  apply_checkpoint(load_checkpoint(path), model.parameters(), config.transformer_digest());
  return model;
}

}  // namespace lar::pipeline
