#include "lar/masks/masks.hpp"

#include "lar/error.hpp"

#include <algorithm>
#include <deque>
#include <sstream>

namespace lar::masks {

template <class Tag>
BinaryMask<Tag>::BinaryMask(Grid bits) : bits_(std::move(bits)) {
  if ((bits_ > 1).any()) throw DataError("binary mask entries must be 0 or 1");
}

template class BinaryMask<PixelTag>;
template class BinaryMask<LatentTag>;

namespace {

bool is_power_of_two(int v) { return v > 0 && (v & (v - 1)) == 0; }

Grid pool_any(const Grid& bits, int factor) {
  if (!is_power_of_two(factor)) throw ConfigError("mask downsampling factor " + std::to_string(factor) + " is not a power of two");
  if (bits.rows() % factor != 0 || bits.cols() % factor != 0) {
    throw ConfigError("mask of " + std::to_string(bits.rows()) + "x" + std::to_string(bits.cols()) +
                      " is not divisible by factor " + std::to_string(factor));
  }
  const auto h = bits.rows() / factor;
  const auto w = bits.cols() / factor;
  Grid out(h, w);
  for (Eigen::Index r = 0; r < h; ++r) {
    for (Eigen::Index c = 0; c < w; ++c) out(r, c) = bits.block(r * factor, c * factor, factor, factor).maxCoeff();
  }
  return out;
}

bool contains(const std::vector<int>& sorted, int v) { return std::binary_search(sorted.begin(), sorted.end(), v); }

}  // namespace

QuantMask downsample_mask(const PixelMask& m, int factor) { return QuantMask(pool_any(m.bits(), factor)); }
QuantMask downsample_mask(const QuantMask& m, int factor) { return QuantMask(pool_any(m.bits(), factor)); }

QuantMask leak_mask(const QuantMask& mprime, int kernel, int stride) {
  if (kernel < 1 || kernel % 2 == 0) throw ConfigError("leak mask kernel must be odd, got " + std::to_string(kernel));
  if (stride != 1 && stride != 2) throw ConfigError("leak mask stride must be 1 or 2, got " + std::to_string(stride));
  const int h = mprime.height();
  const int w = mprime.width();
  const int pad = kernel / 2;
  const int out_h = (h + 2 * pad - kernel) / stride + 1;
  const int out_w = (w + 2 * pad - kernel) / stride + 1;
  const Grid covered = stride == 1 ? mprime.bits() : pool_any(mprime.bits(), 2);

  Grid leak = Grid::Zero(out_h, out_w);
  for (int oy = 0; oy < out_h; ++oy) {
    for (int ox = 0; ox < out_w; ++ox) {
      // All-ones kernel response, clipped to [0, 1].
      int response = 0;
      for (int ky = 0; ky < kernel; ++ky) {
        for (int kx = 0; kx < kernel; ++kx) {
          const int iy = oy * stride - pad + ky;
          const int ix = ox * stride - pad + kx;
          if (iy >= 0 && iy < h && ix >= 0 && ix < w) response += mprime(iy, ix) ? 1 : 0;
        }
      }
      const int clipped = std::min(response, 1);
      leak(oy, ox) = clipped - covered(oy, ox) > 0 ? 1 : 0;
    }
  }
  return QuantMask(std::move(leak));
}

bool TokenGrouping::is_masked(int token) const { return contains(masked, token); }
bool TokenGrouping::is_causal(int token) const { return contains(causal, token); }

void TokenGrouping::validate() const {
  std::vector<int> merged;
  std::set_union(masked.begin(), masked.end(), predictors.begin(), predictors.end(), std::back_inserter(merged));
  if (merged != causal) throw InvalidMaskError("grouping: causal group is not masked ∪ predictors");
  std::vector<int> overlap;
  std::set_intersection(global.begin(), global.end(), causal.begin(), causal.end(), std::back_inserter(overlap));
  if (!overlap.empty()) throw InvalidMaskError("grouping: global and causal groups intersect");
  if (global.size() + causal.size() != static_cast<std::size_t>(n_targets() + 1)) {
    throw InvalidMaskError("grouping: global ∪ causal does not cover the target side");
  }
  for (int j : masked) {
    if (j < 0 || j >= n_targets()) throw InvalidMaskError("grouping: masked index out of range");
    if (!contains(causal, j - 1)) throw InvalidMaskError("grouping: predictor of t_" + std::to_string(j) + " is not causal");
  }
  if (n_cond < 1) throw InvalidMaskError("grouping: at least the condition start token is required");
}

TokenGrouping group_tokens(const QuantMask& mq, int n_cond, GroupingUse use) {
  if (mq.size() == 0) throw ConfigError("group_tokens: empty latent mask");
  if (n_cond < 1) throw ConfigError("group_tokens: n_cond must count the condition start token");
  TokenGrouping g;
  g.n_cond = n_cond;
  g.grid_h = mq.height();
  g.grid_w = mq.width();
  for (int j = 0; j < mq.size(); ++j) {
    if (mq.at(j)) {
      g.masked.push_back(j);
      g.predictors.push_back(j - 1);
    }
  }
  if (g.masked.empty() && use == GroupingUse::kTraining) {
    throw TrainingError("group_tokens: mask has no masked cells, the causal group is empty");
  }
  std::set_union(g.masked.begin(), g.masked.end(), g.predictors.begin(), g.predictors.end(),
                 std::back_inserter(g.causal));
  for (int t = kStartToken; t < mq.size(); ++t) {
    if (!contains(g.causal, t)) g.global.push_back(t);
  }
  g.validate();
  return g;
}

LaVariant parse_la_variant(const std::string& name) {
  if (name == "safe") return LaVariant::kSafe;
  if (name == "literal") return LaVariant::kFigureLiteral;
  throw ConfigError("unknown LA mask variant '" + name + "' (expected safe|literal)");
}

std::string to_string(LaVariant v) { return v == LaVariant::kSafe ? "safe" : "literal"; }

LaDecomposition decompose_la_mask(const TokenGrouping& g, LaVariant variant) {
  const int n = g.n_targets() + 1;
  // Local index i within the T2T block is token i - 1.
  LaDecomposition d{MaskMatrix::Zero(n, n), MaskMatrix::Zero(n, n)};
  for (int row_token : g.global) {
    const int r = row_token + 1;
    for (int col_token = kStartToken; col_token < g.n_targets(); ++col_token) {
      const bool see = variant == LaVariant::kSafe ? !g.is_causal(col_token) : !g.is_masked(col_token);
      if (see) d.global_part(r, col_token + 1) = 1;
    }
  }
  for (int row_token : g.causal) {
    const int r = row_token + 1;
    for (int col_token = kStartToken; col_token < g.n_targets(); ++col_token) {
      const bool see = g.is_causal(col_token) ? col_token <= row_token : true;
      if (see) d.causal_part(r, col_token + 1) = 1;
    }
  }
  return d;
}

namespace {

AttnMask with_condition_blocks(int n_cond, const MaskMatrix& t2t) {
  const int n = static_cast<int>(t2t.rows());
  AttnMask m;
  m.n_cond = n_cond;
  m.allow = MaskMatrix::Zero(n_cond + n, n_cond + n);
  m.allow.topLeftCorner(n_cond, n_cond).setOnes();
  m.allow.bottomLeftCorner(n, n_cond).setOnes();
  m.allow.bottomRightCorner(n, n) = t2t;
  for (Eigen::Index r = 0; r < m.allow.rows(); ++r) {
    if (m.allow.row(r).cast<int>().sum() == 0) {
      throw InvalidMaskError("attention mask row " + std::to_string(r) + " attends nothing");
    }
  }
  return m;
}

}  // namespace

AttnMask build_la_mask(const TokenGrouping& g, LaVariant variant) {
  g.validate();
  const LaDecomposition d = decompose_la_mask(g, variant);
  if (((d.global_part.array() != 0) && (d.causal_part.array() != 0)).any()) {
    throw InvalidMaskError("LA mask: global and causal sub-masks overlap");
  }
  return with_condition_blocks(g.n_cond, d.global_part + d.causal_part);
}

AttnMask build_ar_mask(int n_cond, int n_targets) {
  if (n_cond < 1 || n_targets < 0) throw ConfigError("build_ar_mask: invalid sizes");
  const int n = n_targets + 1;
  MaskMatrix t2t = MaskMatrix::Zero(n, n);
  for (int r = 0; r < n; ++r) t2t.row(r).head(r + 1).setOnes();
  return with_condition_blocks(n_cond, t2t);
}

AttnMask build_ae_mask(const TokenGrouping& g) {
  g.validate();
  const int n = g.n_targets() + 1;
  MaskMatrix t2t = MaskMatrix::Zero(n, n);
  for (int col_token = kStartToken; col_token < g.n_targets(); ++col_token) {
    if (!g.is_masked(col_token)) t2t.col(col_token + 1).setOnes();
  }
  return with_condition_blocks(g.n_cond, t2t);
}

std::string position_label(const TokenGrouping& g, int seq_pos) {
  if (seq_pos == 0) return "c[s]";
  if (seq_pos < g.n_cond) return "c_" + std::to_string(seq_pos - 1);
  const int token = g.token_at(seq_pos);
  if (token == kStartToken) return "t[s]";
  return "t_" + std::to_string(token);
}

namespace {

std::vector<int> shortest_path(const AttnMask& mask, int source, int sink) {
  // Information moves from column c to row r when allow(r, c) = 1.
  const int n = mask.size();
  std::vector<int> parent(n, -2);
  std::deque<int> queue{source};
  parent[source] = -1;
  while (!queue.empty()) {
    const int c = queue.front();
    queue.pop_front();
    if (c == sink) break;
    for (int r = 0; r < n; ++r) {
      if (mask.allow(r, c) && parent[r] == -2) {
        parent[r] = c;
        queue.push_back(r);
      }
    }
  }
  std::vector<int> path;
  if (parent[sink] == -2) return path;
  for (int v = sink; v != -1; v = parent[v]) path.push_back(v);
  std::reverse(path.begin(), path.end());
  return path;
}

}  // namespace

CausalityReport verify_causality(const AttnMask& mask, const TokenGrouping& g, int layers) {
  if (layers < 1) throw ConfigError("verify_causality: layers must be at least 1");
  if (mask.size() != g.seq_len() || mask.n_cond != g.n_cond) {
    throw ConfigError("verify_causality: mask of size " + std::to_string(mask.size()) + " for a sequence of " +
                      std::to_string(g.seq_len()));
  }
  CausalityReport report;
  report.layers = layers;
  if (g.masked.empty()) return report;

  const int n = mask.size();
  const int sources = static_cast<int>(g.masked.size());
  // Residual connections carry every position's content forward: add self edges.
  Eigen::MatrixXf step = mask.allow.cast<float>();
  step.diagonal().setOnes();
  step = (step.array() > 0.0f).cast<float>();

  Eigen::MatrixXf reach = Eigen::MatrixXf::Zero(n, sources);
  for (int s = 0; s < sources; ++s) reach(g.seq_index(g.masked[s]), s) = 1.0f;
  Eigen::MatrixXi first_hop = Eigen::MatrixXi::Constant(n, sources, -1);
  for (int s = 0; s < sources; ++s) first_hop(g.seq_index(g.masked[s]), s) = 0;

  for (int hop = 1; hop <= layers; ++hop) {
    Eigen::MatrixXf next = ((step * reach).array() > 0.0f).cast<float>();
    const bool grew = (next.array() != reach.array()).any();
    for (int s = 0; s < sources; ++s) {
      for (int r = 0; r < n; ++r) {
        if (next(r, s) > 0.0f && first_hop(r, s) < 0) first_hop(r, s) = hop;
      }
    }
    reach = std::move(next);
    if (!grew) break;
  }

  for (int s = 0; s < sources; ++s) {
    const int j = g.masked[s];
    for (int i : g.masked) {
      if (i > j) break;
      const int sink = g.seq_index(i - 1);
      const int hops = first_hop(sink, s);
      if (hops < 0) continue;
      LeakPath leak;
      leak.source_token = j;
      leak.sink_token = i - 1;
      leak.length = hops;
      leak.path = shortest_path(mask, g.seq_index(j), sink);
      report.violations.push_back(std::move(leak));
    }
  }
  report.pass = report.violations.empty();
  return report;
}

std::string CausalityReport::describe(const TokenGrouping& g) const {
  std::ostringstream out;
  out << (pass ? "PASS" : "FAIL") << ": " << g.masked.size() << " masked tokens, " << layers << " layers, "
      << violations.size() << " leak(s)\n";
  for (const LeakPath& v : violations) {
    out << "  leak t_" << v.source_token << " -> " << (v.sink_token == kStartToken ? std::string("t[s]") : "t_" + std::to_string(v.sink_token))
        << " in " << v.length << " hop(s): ";
    for (std::size_t k = 0; k < v.path.size(); ++k) {
      const int pos = v.path[k];
      out << (k ? " -> " : "") << position_label(g, pos);
      const int token = g.token_at(pos);
      if (pos >= g.n_cond && std::binary_search(g.global.begin(), g.global.end(), token)) out << "[global]";
    }
    out << '\n';
  }
  return out.str();
}

}  // namespace lar::masks
