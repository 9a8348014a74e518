#include "lar/transformer/transformer.hpp"

#include "lar/error.hpp"
#include "lar/numerics/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace lar::transformer {

void TransformerConfig::validate() const {
  if (depth < 0 || d_model < 1 || heads < 1 || d_ff < 1) throw ConfigError("transformer: invalid sizes");
  if (d_model % heads != 0) {
    throw ConfigError("transformer: d_model " + std::to_string(d_model) + " not divisible by " +
                      std::to_string(heads) + " heads");
  }
  if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("transformer: dropout must lie in [0, 1)");
  if (codebook_size < 2 || grid_h < 1 || grid_w < 1 || n_points < 0) throw ConfigError("transformer: invalid vocabulary or grid");
}

Linear::Linear(int in, int out, Rng& rng, double init_scale) : weight({in, out}), bias({out}) {
  const double bound = init_scale * std::sqrt(3.0 / in);
  for (double& w : weight.data()) w = rng.uniform(-bound, bound);
  weight.set_requires_grad();
  bias.set_requires_grad();
}

Tensor Linear::forward(const Tensor& x) const { return add_row_bias(matmul(x, weight), bias); }

void Linear::collect(ParamList& out, const std::string& prefix) const {
  out.push_back({prefix + ".weight", weight});
  out.push_back({prefix + ".bias", bias});
}

AttentionLayer::AttentionLayer(int d_model, int heads_, Rng& rng)
    : query(d_model, d_model, rng),
      key(d_model, d_model, rng),
      value(d_model, d_model, rng),
      output(d_model, d_model, rng, 0.5),
      heads(heads_) {}

void AttentionLayer::collect(ParamList& out, const std::string& prefix) const {
  query.collect(out, prefix + ".query");
  key.collect(out, prefix + ".key");
  value.collect(out, prefix + ".value");
  output.collect(out, prefix + ".output");
}

Tensor masked_attention(const Tensor& h, const AttnMask& mask, const AttentionLayer& layer, AttentionTrace* trace) {
  if (h.rank() != 2 || h.dim(0) != mask.size()) {
    throw ConfigError("masked_attention: hidden " + shape_string(h.shape()) + " vs mask of size " +
                      std::to_string(mask.size()));
  }
  const int d = h.dim(1);
  if (d % layer.heads != 0) throw ConfigError("masked_attention: width not divisible by head count");
  const int dh = d / layer.heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

  const Tensor q = layer.query.forward(h);
  const Tensor k = layer.key.forward(h);
  const Tensor v = layer.value.forward(h);
  std::vector<Tensor> heads;
  for (int head = 0; head < layer.heads; ++head) {
    const int lo = head * dh;
    const int hi = lo + dh;
    const Tensor scores = scale(matmul(slice_cols(q, lo, hi), transpose(slice_cols(k, lo, hi))), inv_sqrt);
    const Tensor weights = softmax(mask_fill_neg_inf(scores, mask.flat()));
    if (trace) trace->weights.push_back(weights);
    heads.push_back(matmul(weights, slice_cols(v, lo, hi)));
  }
  return layer.output.forward(layer.heads == 1 ? heads.front() : concat_cols(heads));
}

TransformerBlock::TransformerBlock(const TransformerConfig& config, Rng& rng)
    : ln1_gain({config.d_model}, 1.0),
      ln1_bias({config.d_model}, 0.0),
      ln2_gain({config.d_model}, 1.0),
      ln2_bias({config.d_model}, 0.0),
      attention(config.d_model, config.heads, rng),
      ff_in(config.d_model, config.d_ff, rng),
      ff_out(config.d_ff, config.d_model, rng, 0.5) {
  for (Tensor* t : {&ln1_gain, &ln1_bias, &ln2_gain, &ln2_bias}) t->set_requires_grad();
}

Tensor TransformerBlock::forward(const Tensor& x, const AttnMask& mask, double rate, Rng* rng) const {
  auto drop = [&](const Tensor& t) { return (rng && rate > 0.0) ? dropout(t, rate, *rng) : t; };
  Tensor h = add(x, drop(masked_attention(layer_norm(x, ln1_gain, ln1_bias), mask, attention)));
  return add(h, drop(ff_out.forward(gelu(ff_in.forward(layer_norm(h, ln2_gain, ln2_bias))))));
}

void TransformerBlock::collect(ParamList& out, const std::string& prefix) const {
  out.push_back({prefix + ".ln1.gain", ln1_gain});
  out.push_back({prefix + ".ln1.bias", ln1_bias});
  attention.collect(out, prefix + ".attn");
  out.push_back({prefix + ".ln2.gain", ln2_gain});
  out.push_back({prefix + ".ln2.bias", ln2_bias});
  ff_in.collect(out, prefix + ".ff_in");
  ff_out.collect(out, prefix + ".ff_out");
}

PointEncoder::PointEncoder(int hidden, int d_model, Rng& rng)
    : fc1(3, hidden, rng), fc2(hidden, hidden, rng), fc3(hidden, d_model, rng, 0.1) {}

Tensor PointEncoder::forward(const std::vector<Landmark>& landmarks) const {
  Buffer raw;
  raw.reserve(landmarks.size() * 3);
  for (const Landmark& p : landmarks) {
    raw.push_back(p.x);
    raw.push_back(p.y);
    raw.push_back(p.visible);
  }
  const Tensor x({static_cast<int>(landmarks.size()), 3}, std::move(raw));
  return fc3.forward(relu(fc2.forward(relu(fc1.forward(x)))));
}

void PointEncoder::collect(ParamList& out, const std::string& prefix) const {
  fc1.collect(out, prefix + ".fc1");
  fc2.collect(out, prefix + ".fc2");
  fc3.collect(out, prefix + ".fc3");
}

LaTransformer::LaTransformer(const TransformerConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  Rng rng = Rng::derive(seed, 0x7a3f);
  const int d = config_.d_model;
  token_embedding_ = Tensor({config_.vocab_size(), d});
  for (double& v : token_embedding_.data()) v = 0.02 * rng.normal();
  position_embedding_ = Tensor({layout().seq_len(), d});
  for (double& v : position_embedding_.data()) v = 0.02 * rng.normal();
  token_embedding_.set_requires_grad();
  position_embedding_.set_requires_grad();
  if (config_.n_points > 0) points_ = PointEncoder(config_.point_hidden, d, rng);
  for (int b = 0; b < config_.depth; ++b) blocks_.emplace_back(config_, rng);
  final_gain_ = Tensor({d}, 1.0).set_requires_grad();
  final_bias_ = Tensor({d}, 0.0).set_requires_grad();
  head_ = Linear(d, config_.codebook_size, rng, 0.1);
}

Tensor LaTransformer::encode_points(const std::vector<Landmark>& landmarks) const {
  if (static_cast<int>(landmarks.size()) != config_.n_points) {
    throw DataError("encode_points: expected " + std::to_string(config_.n_points) + " landmarks, got " +
                    std::to_string(landmarks.size()));
  }
  if (config_.n_points == 0) return Tensor();
  return points_.forward(landmarks);
}

Tensor LaTransformer::embed_sequence(const SequenceInput& input) const {
  const int n = config_.n_grid();
  if (static_cast<int>(input.cond_ids.size()) != n || static_cast<int>(input.target_ids.size()) != n) {
    throw DataError("embed_sequence: expected " + std::to_string(n) + " condition and target ids");
  }
  std::vector<int> cond{config_.cond_start_id()};
  cond.insert(cond.end(), input.cond_ids.begin(), input.cond_ids.end());
  std::vector<int> target{config_.target_start_id()};
  target.insert(target.end(), input.target_ids.begin(), input.target_ids.end());
  // gather_rows rejects ids outside the vocabulary.
  std::vector<Tensor> parts{gather_rows(token_embedding_, cond)};
  if (config_.n_points > 0) parts.push_back(encode_points(input.points));
  else if (!input.points.empty()) throw DataError("embed_sequence: model takes no landmarks");
  parts.push_back(gather_rows(token_embedding_, target));
  return add(concat_rows(parts), position_embedding_);
}

Tensor LaTransformer::readout(const Tensor& hidden) const {
  return head_.forward(layer_norm(hidden, final_gain_, final_bias_));
}

Tensor LaTransformer::forward(const SequenceInput& input, const AttnMask& mask, const ForwardOptions& options) const {
  const SequenceLayout lay = layout();
  if (mask.size() != lay.seq_len() || mask.n_cond != lay.n_cond()) {
    throw ConfigError("forward: attention mask of size " + std::to_string(mask.size()) + " for sequence of " +
                      std::to_string(lay.seq_len()));
  }
  const bool stochastic = options.training && config_.dropout > 0.0;
  if (stochastic && !options.rng) throw ConfigError("forward: training with dropout needs an rng");
  Rng* rng = stochastic ? options.rng : nullptr;

  Tensor h = embed_sequence(input);
  if (rng) h = dropout(h, config_.dropout, *rng);
  for (const TransformerBlock& block : blocks_) h = block.forward(h, mask, config_.dropout, rng);
  return readout(h);
}

ParamList LaTransformer::parameters() const {
  ParamList out{{"embed.token", token_embedding_}, {"embed.position", position_embedding_}};
  if (config_.n_points > 0) points_.collect(out, "points");
  for (std::size_t b = 0; b < blocks_.size(); ++b) blocks_[b].collect(out, "block" + std::to_string(b));
  out.push_back({"final_ln.gain", final_gain_});
  out.push_back({"final_ln.bias", final_bias_});
  head_.collect(out, "head");
  return out;
}

TokenGrouping grouping_for(const TransformerConfig& config, const QuantMask& mq, masks::GroupingUse use) {
  if (mq.height() != config.grid_h || mq.width() != config.grid_w) {
    throw ConfigError("latent mask " + std::to_string(mq.height()) + "x" + std::to_string(mq.width()) +
                      " does not match the model grid");
  }
  return masks::group_tokens(mq, SequenceLayout::from(config).n_cond(), use);
}

Tensor masked_nll(const Tensor& logits, const std::vector<int>& target_ids, const TokenGrouping& grouping) {
  if (grouping.masked.empty()) throw TrainingError("masked_nll: no masked tokens");
  if (logits.rank() != 2 || logits.dim(0) != grouping.seq_len()) {
    throw ConfigError("masked_nll: logits " + shape_string(logits.shape()) + " for a sequence of " +
                      std::to_string(grouping.seq_len()));
  }
  if (static_cast<int>(target_ids.size()) != grouping.n_targets()) throw ConfigError("masked_nll: target id count mismatch");
  std::vector<int> rows;
  std::vector<int> labels;
  for (int j : grouping.masked) {
    rows.push_back(grouping.seq_index(j - 1));
    labels.push_back(target_ids[static_cast<std::size_t>(j)]);
  }
  std::vector<int> diag(rows.size());
  std::iota(diag.begin(), diag.end(), 0);
  const Tensor log_probs = log_softmax(gather_rows(logits, rows));
  return scale(mean(pick(log_probs, diag, labels)), -1.0);
}

int sample_token(std::span<const double> logits, const SamplerConfig& sampler, Rng& rng) {
  if (logits.empty()) throw ConfigError("sample_token: empty logits");
  if (sampler.temperature < 0.0) throw ConfigError("sample_token: temperature must be non-negative");
  if (sampler.temperature == 0.0) {
    return static_cast<int>(std::max_element(logits.begin(), logits.end()) - logits.begin());
  }
  const int n = static_cast<int>(logits.size());
  if (sampler.top_k < 1 || sampler.top_k > n) throw ConfigError("sample_token: top_k outside [1, K]");
  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return logits[a] > logits[b]; });
  order.resize(static_cast<std::size_t>(sampler.top_k));

  std::vector<double> weight(order.size());
  const double peak = logits[order.front()];
  double total = 0.0;
  for (std::size_t i = 0; i < order.size(); ++i) {
    weight[i] = std::exp((logits[order[i]] - peak) / sampler.temperature);
    total += weight[i];
  }
  double u = rng.uniform() * total;
  for (std::size_t i = 0; i < order.size(); ++i) {
    u -= weight[i];
    if (u < 0.0) return order[i];
  }
  return order.back();
}

namespace {

std::span<const double> logits_row(const Tensor& logits, int row) {
  const auto width = static_cast<std::size_t>(logits.dim(1));
  return logits.data().subspan(static_cast<std::size_t>(row) * width, width);
}

}  // namespace

SampleResult sample_local(const LaTransformer& model, const SequenceInput& input, const QuantMask& mq,
                          const SamplerConfig& sampler) {
  const TokenGrouping g = grouping_for(model.config(), mq);
  SampleResult result{input.target_ids, 0};
  if (g.masked.empty()) return result;

  const AttnMask mask = masks::build_la_mask(g, masks::LaVariant::kSafe);
  SequenceInput current = input;
  for (int j : g.masked) current.target_ids[static_cast<std::size_t>(j)] = model.config().mask_id();

  NoGradGuard no_grad;
  Rng rng(sampler.seed);
  for (int j : g.masked) {
    const Tensor logits = model.forward(current, mask);
    const int token = sample_token(logits_row(logits, g.seq_index(j - 1)), sampler, rng);
    current.target_ids[static_cast<std::size_t>(j)] = token;
    ++result.steps;
  }
  result.target_ids = std::move(current.target_ids);
  return result;
}

SampleResult sample_full(const LaTransformer& model, const SequenceInput& input, const SamplerConfig& sampler) {
  const SequenceLayout lay = model.layout();
  const AttnMask mask = masks::build_ar_mask(lay.n_cond(), lay.n_targets);
  SequenceInput current = input;
  std::fill(current.target_ids.begin(), current.target_ids.end(), model.config().mask_id());

  NoGradGuard no_grad;
  Rng rng(sampler.seed);
  SampleResult result;
  for (int j = 0; j < lay.n_targets; ++j) {
    const Tensor logits = model.forward(current, mask);
    // Row of t_{j-1} (t[s] for j = 0) predicts t_j.
    current.target_ids[static_cast<std::size_t>(j)] = sample_token(logits_row(logits, lay.target_pos(j - 1)), sampler, rng);
    ++result.steps;
  }
  result.target_ids = std::move(current.target_ids);
  return result;
}

}  // namespace lar::transformer
