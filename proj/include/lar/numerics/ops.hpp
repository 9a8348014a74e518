#pragma once

#include "lar/numerics/rng.hpp"
#include "lar/numerics/tensor.hpp"

#include <cstdint>
#include <span>
#include <vector>

namespace lar {

/// Variance floor used by instance and layer normalization.
inline constexpr double kNormEpsilon = 1e-5;

// Elementwise arithmetic. Operands must have identical shapes.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor neg(const Tensor& a);

/// x[rows, n] + bias[n] broadcast over rows.
Tensor add_row_bias(const Tensor& x, const Tensor& bias);

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
/// Same data viewed under a new shape of equal element count.
Tensor reshape(const Tensor& a, Shape shape);

Tensor slice_cols(const Tensor& a, int begin, int end);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor slice_rows(const Tensor& a, int begin, int end);
Tensor concat_rows(const std::vector<Tensor>& parts);

/// Rows of table[V, d] selected by ids; gradient scatters back into the table.
Tensor gather_rows(const Tensor& table, std::span<const int> ids);
/// x[rows[i], cols[i]] for each i, as a 1-D tensor.
Tensor pick(const Tensor& x, std::span<const int> rows, std::span<const int> cols);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor abs(const Tensor& a);
Tensor square(const Tensor& a);

Tensor relu(const Tensor& a);
Tensor gelu(const Tensor& a);
/// x * sigmoid(x).
Tensor swish(const Tensor& a);
Tensor tanh(const Tensor& a);

/// Softmax over the last axis. Entries equal to -inf receive exactly zero
/// weight; a row with no finite entry throws InvalidMaskError.
Tensor softmax(const Tensor& x);
Tensor log_softmax(const Tensor& x);

/// Sets x[r, c] to -inf wherever allow[r * cols + c] == 0. The gradient is
/// passed through at allowed entries only.
Tensor mask_fill_neg_inf(const Tensor& x, std::span<const std::uint8_t> allow);

/// Layer normalization over the last axis of x[rows, d] with gain/bias[d].
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = kNormEpsilon);

/// Per-channel normalization of x[C, H, W] followed by gain/bias[C].
///
/// When `exclude` is non-empty it holds H*W flags; statistics are taken only
/// over positions whose flag is 0 so that excluded values cannot influence
/// any other position. If every position is excluded all are used.
Tensor instance_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                     std::span<const std::uint8_t> exclude = {}, double eps = kNormEpsilon);

/// Cross-correlation of input[C_in, H, W] with weight[C_out, C_in, k, k].
Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias, int stride, int padding);

/// Windowed maximum over x[C, H, W]; (H - kernel) and (W - kernel) must be
/// divisible by stride.
Tensor max_pool2d(const Tensor& x, int kernel, int stride);

/// Nearest-neighbour upsampling of x[C, H, W] by an integer factor.
Tensor upsample_nearest(const Tensor& x, int factor);

/// Per spatial position of [C, H, W] operands: where[p] ? b : a.
Tensor select_spatial(std::span<const std::uint8_t> where, const Tensor& a, const Tensor& b);

/// Multiplies each channel of x[C, H, W] by a constant spatial weight[H*W].
Tensor scale_spatial(const Tensor& x, std::span<const double> weight);

/// Forward value is `value` exactly; the incoming gradient is copied to
/// `input` unchanged (straight-through estimator).
Tensor straight_through(const Tensor& input, const Tensor& value);

/// Inverted dropout; identity when rate == 0.
Tensor dropout(const Tensor& x, double rate, Rng& rng);

}  // namespace lar
