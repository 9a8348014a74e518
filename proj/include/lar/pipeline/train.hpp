#pragma once

#include "lar/numerics/adam.hpp"
#include "lar/pipeline/checkpoint.hpp"
#include "lar/pipeline/config.hpp"
#include "lar/pipeline/dataset.hpp"
#include "lar/transformer/transformer.hpp"
#include "lar/tsvq/tsvq.hpp"

#include <filesystem>
#include <functional>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

namespace lar::pipeline {

struct StepLog {
  int step = 0;
  std::string phase;
  double lr = 0.0;
  double loss = 0.0;
  double recon = 0.0;  ///< VQ only: L1 on the model's [-1, 1] scale
};

struct TrainOptions {
  std::filesystem::path out_dir;              ///< empty: write nothing
  std::optional<std::filesystem::path> resume;
  int stop_after = -1;                        ///< total step count to stop at; -1 runs the schedule
  std::ostream* log = nullptr;                ///< per-step text log
  std::function<void(const StepLog&)> on_step;
  /// Called before every step; tests use it to inject faults.
  std::function<void(int step, const ParamList&)> before_step;
};

/// Rounds every parameter to float32 precision, the checkpoint payload type.
/// Applied after each optimizer step so that a resumed run continues from
/// exactly the in-memory state.
void round_to_f32(const ParamList& params);

// VQ stage -----------------------------------------------------------------

struct VqTrainResult {
  tsvq::VqModel model;
  AdamState optimizer;
  int steps_done = 0;
  std::vector<StepLog> history;
};

/// Learning rate for a global VQ step.
double vq_learning_rate(const RunConfig& config, int step);

/// Two-phase schedule: unmasked pretraining with every cell quantized, then
/// masked finetuning through the two-stream encoder and local decode. On a
/// non-finite loss or gradient the last good parameters are written to
/// `vq_last_good.ckpt` in the output directory and TrainingError is rethrown.
VqTrainResult train_vq(const RunConfig& config, const std::vector<SyntheticSample>& data,
                       const TrainOptions& options = {});

/// Mean absolute error in [0, 1] units between the masked-phase local decode
/// and the image, over the targets of `data`.
double vq_reconstruction_mae(const tsvq::VqModel& model, const std::vector<SyntheticSample>& data);

tsvq::VqModel load_vq(const RunConfig& config, const std::filesystem::path& path);

// Transformer stage ----------------------------------------------------------

struct TokenizedSample {
  std::vector<int> cond_ids;
  std::vector<int> target_ids;  ///< encoder tokens of the target under its mask
  masks::QuantMask mq;
  std::vector<transformer::Landmark> points;

  transformer::SequenceInput input() const { return {cond_ids, target_ids, points}; }
};

TokenizedSample tokenize(const tsvq::VqModel& vq, const SyntheticSample& sample);

struct TransformerTrainResult {
  transformer::LaTransformer model;
  AdamState optimizer;
  int steps_done = 0;
  int skipped = 0;  ///< samples with an empty latent mask
  double initial_nll = 0.0;
  double final_nll = 0.0;
  std::vector<StepLog> history;
};

/// Linear warmup to the base rate, then linear decay to zero.
double transformer_learning_rate(const RunConfig& config, int step);

/// Mean masked NLL over `samples` with dropout disabled.
double evaluate_nll(const transformer::LaTransformer& model, const std::vector<TokenizedSample>& samples);

TransformerTrainResult train_transformer(const RunConfig& config, const tsvq::VqModel& vq,
                                         const std::vector<SyntheticSample>& data, const TrainOptions& options = {});

transformer::LaTransformer load_transformer(const RunConfig& config, const std::filesystem::path& path);

}  // namespace lar::pipeline
