#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace lar::masks {

using Grid = Eigen::Array<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Binary region mask, 1 = masked. The tag separates image-resolution masks
/// from latent-resolution ones at compile time.
template <class Tag>
class BinaryMask {
 public:
  BinaryMask() = default;
  BinaryMask(int height, int width) : bits_(Grid::Zero(height, width)) {}
  explicit BinaryMask(Grid bits);

  static BinaryMask ones(int height, int width) {
    BinaryMask m(height, width);
    m.bits_.setOnes();
    return m;
  }

  int height() const { return static_cast<int>(bits_.rows()); }
  int width() const { return static_cast<int>(bits_.cols()); }
  int size() const { return static_cast<int>(bits_.size()); }

  bool operator()(int row, int col) const { return bits_(row, col) != 0; }
  bool at(int flat_index) const { return bits_.data()[flat_index] != 0; }
  void set(int row, int col, bool on = true) { bits_(row, col) = on ? 1 : 0; }
  void set(int flat_index, bool on = true) { bits_.data()[flat_index] = on ? 1 : 0; }

  const Grid& bits() const { return bits_; }
  /// Row-major flags, one per cell.
  std::span<const std::uint8_t> flat() const { return {bits_.data(), static_cast<std::size_t>(bits_.size())}; }

  int count() const { return static_cast<int>(bits_.template cast<int>().sum()); }
  bool any() const { return count() > 0; }
  bool all() const { return count() == size(); }
  double rate() const { return size() ? static_cast<double>(count()) / size() : 0.0; }

  /// Same bits under another resolution tag.
  template <class Other>
  BinaryMask<Other> retag() const {
    return BinaryMask<Other>(bits_);
  }

  friend bool operator==(const BinaryMask& a, const BinaryMask& b) {
    return a.height() == b.height() && a.width() == b.width() && (a.bits_ == b.bits_).all();
  }

 private:
  Grid bits_;
};

struct PixelTag {};
struct LatentTag {};

using PixelMask = BinaryMask<PixelTag>;
/// Mask at a feature or latent resolution.
using QuantMask = BinaryMask<LatentTag>;

/// Max-pools a mask by a power-of-two factor: a cell is 1 iff any covered cell is.
QuantMask downsample_mask(const PixelMask& m, int factor);
QuantMask downsample_mask(const QuantMask& m, int factor);

/// Positions whose `kernel`x`kernel` receptive field (at `stride`) touches the
/// mask but which are not themselves masked. For stride 2 the result is at the
/// output resolution and the subtracted mask is the 2x max-pooled input.
QuantMask leak_mask(const QuantMask& mprime, int kernel = 3, int stride = 1);

/// Token index of the target start token t[s]; target tokens are 0..hw-1.
inline constexpr int kStartToken = -1;

enum class GroupingUse { kTraining, kInference };

/// Partition of the target side of the sequence into the global group and the
/// causal group (masked tokens plus the tokens that predict them).
struct TokenGrouping {
  int n_cond = 1;
  int grid_h = 0;
  int grid_w = 0;
  std::vector<int> masked;      ///< ascending raster indices
  std::vector<int> predictors;  ///< ascending; kStartToken predicts token 0
  std::vector<int> causal;      ///< masked ∪ predictors, ascending
  std::vector<int> global;      ///< remaining target-side tokens, ascending

  int n_targets() const { return grid_h * grid_w; }
  int seq_len() const { return n_cond + 1 + n_targets(); }
  /// Sequence position of a target-side token (kStartToken for t[s]).
  int seq_index(int token) const { return n_cond + 1 + token; }
  int token_at(int seq_pos) const { return seq_pos - n_cond - 1; }
  bool is_masked(int token) const;
  bool is_causal(int token) const;

  /// Throws InvalidMaskError if the set relations do not hold.
  void validate() const;
};

/// Raster-order grouping of a latent mask. With kTraining an all-zero mask
/// throws TrainingError; with kInference it yields an empty causal group.
TokenGrouping group_tokens(const QuantMask& mq, int n_cond, GroupingUse use = GroupingUse::kInference);

using MaskMatrix = Eigen::Matrix<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Binary attention matrix over [c[s], c_1.., points.., t[s], t_1..];
/// allow(r, c) = 1 means row r may attend column c.
struct AttnMask {
  MaskMatrix allow;
  int n_cond = 0;

  int size() const { return static_cast<int>(allow.rows()); }
  int n_target_side() const { return size() - n_cond; }
  auto t2t() const { return allow.bottomRightCorner(n_target_side(), n_target_side()); }
  std::span<const std::uint8_t> flat() const {
    return {allow.data(), static_cast<std::size_t>(allow.size())};
  }
  friend bool operator==(const AttnMask& a, const AttnMask& b) {
    return a.n_cond == b.n_cond && a.allow.rows() == b.allow.rows() && a.allow == b.allow;
  }
};

enum class LaVariant {
  /// Global rows never attend causal columns; safe at any depth.
  kSafe,
  /// Global rows also attend unmasked causal columns. Leaks through 3-hop paths.
  kFigureLiteral,
};

LaVariant parse_la_variant(const std::string& name);
std::string to_string(LaVariant v);

/// The two row-disjoint halves of the T2T block: rows of global tokens and
/// rows of causal tokens.
struct LaDecomposition {
  MaskMatrix global_part;
  MaskMatrix causal_part;
};

LaDecomposition decompose_la_mask(const TokenGrouping& g, LaVariant variant = LaVariant::kSafe);
AttnMask build_la_mask(const TokenGrouping& g, LaVariant variant = LaVariant::kSafe);
/// Vanilla lower-triangular mask over t[s] plus `n_targets` target tokens.
AttnMask build_ar_mask(int n_cond, int n_targets);
/// Every target row sees all conditions and all unmasked target-side columns
/// (t[s] included); masked columns are seen by nobody.
AttnMask build_ae_mask(const TokenGrouping& g);

struct LeakPath {
  int source_token = 0;  ///< masked token whose content escapes
  int sink_token = 0;    ///< predictor row that receives it
  int length = 0;        ///< shortest number of attention hops
  std::vector<int> path;  ///< sequence positions, source first
};

struct CausalityReport {
  bool pass = true;
  int layers = 0;
  std::vector<LeakPath> violations;

  std::string describe(const TokenGrouping& g) const;
};

/// Bounded reachability over `layers` attention hops (with residual self
/// edges). Fails if any masked t_j reaches its own predictor row or the
/// predictor row of an earlier masked token.
CausalityReport verify_causality(const AttnMask& mask, const TokenGrouping& g, int layers);

/// Human-readable label of a sequence position ("c[s]", "c_3", "t[s]", "t_5").
std::string position_label(const TokenGrouping& g, int seq_pos);

}  // namespace lar::masks
