#pragma once

#include "lar/masks/masks.hpp"
#include "lar/numerics/rng.hpp"
#include "lar/numerics/tensor.hpp"
#include "lar/tsvq/layers.hpp"

#include <cstdint>
#include <span>
#include <vector>

namespace lar::transformer {

using masks::AttnMask;
using masks::QuantMask;
using masks::TokenGrouping;

struct TransformerConfig {
  int depth = 4;
  int d_model = 128;
  int heads = 4;
  int d_ff = 512;
  double dropout = 0.1;
  int codebook_size = 64;  ///< K; readout covers code tokens only
  int grid_h = 8;
  int grid_w = 8;
  int n_points = 0;        ///< landmark condition tokens
  int point_hidden = 64;

  int n_grid() const { return grid_h * grid_w; }
  /// Code tokens plus c[s], t[s] and [MASK].
  int vocab_size() const { return codebook_size + 3; }
  int cond_start_id() const { return codebook_size; }
  int target_start_id() const { return codebook_size + 1; }
  int mask_id() const { return codebook_size + 2; }
  void validate() const;
};

/// [c[s], c_0..c_{hw-1}, p_0..p_{n-1}, t[s], t_0..t_{hw-1}].
struct SequenceLayout {
  int n_cond_tokens = 0;
  int n_points = 0;
  int n_targets = 0;

  static SequenceLayout from(const TransformerConfig& c) { return {c.n_grid(), c.n_points, c.n_grid()}; }
  /// Condition-side positions, c[s] and point tokens included.
  int n_cond() const { return 1 + n_cond_tokens + n_points; }
  int seq_len() const { return n_cond() + 1 + n_targets; }
  int point_pos(int i) const { return 1 + n_cond_tokens + i; }
  int target_start_pos() const { return n_cond(); }
  int target_pos(int j) const { return n_cond() + 1 + j; }
};

struct Landmark {
  double x = 0.0;  ///< normalized to [0, 1]
  double y = 0.0;
  double visible = 1.0;
};

struct SamplerConfig {
  double temperature = 1.0;  ///< 0 selects greedy argmax
  int top_k = 32;
  std::uint64_t seed = 0;
};

struct Linear {
  Tensor weight;  ///< [in, out]
  Tensor bias;    ///< [out]

  Linear() = default;
  Linear(int in, int out, Rng& rng, double init_scale = 1.0);
  Tensor forward(const Tensor& x) const;
  void collect(ParamList& out, const std::string& prefix) const;
};

struct AttentionLayer {
  Linear query;
  Linear key;
  Linear value;
  Linear output;
  int heads = 1;

  AttentionLayer() = default;
  AttentionLayer(int d_model, int heads, Rng& rng);
  void collect(ParamList& out, const std::string& prefix) const;
};

/// Per-head softmax weights, filled on request.
struct AttentionTrace {
  std::vector<Tensor> weights;  ///< one [S, S] per head
};

/// Multi-head scaled dot-product self-attention over h[S, d]; scores at
/// disallowed (row, column) pairs are set to -inf before the softmax.
Tensor masked_attention(const Tensor& h, const AttnMask& mask, const AttentionLayer& layer,
                        AttentionTrace* trace = nullptr);

/// Pre-norm block: x + attn(ln(x)), then x + ff(ln(x)).
struct TransformerBlock {
  Tensor ln1_gain, ln1_bias, ln2_gain, ln2_bias;
  AttentionLayer attention;
  Linear ff_in;
  Linear ff_out;

  TransformerBlock() = default;
  TransformerBlock(const TransformerConfig& config, Rng& rng);
  Tensor forward(const Tensor& x, const AttnMask& mask, double dropout, Rng* rng) const;
  void collect(ParamList& out, const std::string& prefix) const;
};

/// Three fully connected layers with ReLU between them, applied to each
/// landmark independently.
struct PointEncoder {
  Linear fc1;
  Linear fc2;
  Linear fc3;

  PointEncoder() = default;
  PointEncoder(int hidden, int d_model, Rng& rng);
  Tensor forward(const std::vector<Landmark>& landmarks) const;
  void collect(ParamList& out, const std::string& prefix) const;
};

struct SequenceInput {
  std::vector<int> cond_ids;    ///< n_grid code ids
  std::vector<int> target_ids;  ///< n_grid ids; masked cells may hold mask_id
  std::vector<Landmark> points;
};

struct ForwardOptions {
  bool training = false;
  Rng* rng = nullptr;  ///< dropout stream, required when training with dropout
};

class LaTransformer {
 public:
  LaTransformer() = default;
  LaTransformer(const TransformerConfig& config, std::uint64_t seed);

  const TransformerConfig& config() const { return config_; }
  SequenceLayout layout() const { return SequenceLayout::from(config_); }

  /// Token embedding plus learned absolute position embedding, [S, d].
  Tensor embed_sequence(const SequenceInput& input) const;
  /// Per-landmark features [n_points, d]. Throws DataError on a count mismatch.
  Tensor encode_points(const std::vector<Landmark>& landmarks) const;
  /// Logits [S, K]; row r scores the token that follows position r.
  Tensor forward(const SequenceInput& input, const AttnMask& mask, const ForwardOptions& options = {}) const;
  /// Final normalization and readout applied to hidden states [S, d].
  Tensor readout(const Tensor& hidden) const;

  const std::vector<TransformerBlock>& blocks() const { return blocks_; }
  Tensor& token_embedding() { return token_embedding_; }
  Tensor& position_embedding() { return position_embedding_; }
  const Tensor& token_embedding() const { return token_embedding_; }
  const Tensor& position_embedding() const { return position_embedding_; }

  ParamList parameters() const;

 private:
  TransformerConfig config_;
  Tensor token_embedding_;     ///< [vocab, d]
  Tensor position_embedding_;  ///< [S, d]
  PointEncoder points_;
  std::vector<TransformerBlock> blocks_;
  Tensor final_gain_, final_bias_;
  Linear head_;
};

/// Grouping of a latent mask in this model's sequence layout.
TokenGrouping grouping_for(const TransformerConfig& config, const QuantMask& mq,
                           masks::GroupingUse use = masks::GroupingUse::kInference);

/// Mean of -log softmax(logits[pred(j)])[target_ids[j]] over masked tokens j.
/// Throws TrainingError when nothing is masked.
Tensor masked_nll(const Tensor& logits, const std::vector<int>& target_ids, const TokenGrouping& grouping);

/// Draws one code id from a logits row with temperature and top-k.
int sample_token(std::span<const double> logits, const SamplerConfig& sampler, Rng& rng);

struct SampleResult {
  std::vector<int> target_ids;
  int steps = 0;
};

/// Generates masked cells in raster order, one full forward pass per cell,
/// under the safe LA mask. Unmasked ids are never modified.
SampleResult sample_local(const LaTransformer& model, const SequenceInput& input, const QuantMask& mq,
                          const SamplerConfig& sampler);

/// Baseline: generates every target cell with the vanilla AR mask.
SampleResult sample_full(const LaTransformer& model, const SequenceInput& input, const SamplerConfig& sampler);

}  // namespace lar::transformer
