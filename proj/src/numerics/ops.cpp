#include "lar/numerics/ops.hpp"

#include "lar/error.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

namespace lar {

namespace {

using detail::Node;

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

Buffer* grad_of(Node& self, std::size_t i) {
  Node& parent = *self.parents[i];
  return parent.requires_grad ? &parent.ensure_grad() : nullptr;
}

const Buffer& data_of(const Node& self, std::size_t i) { return self.parents[i]->data; }

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ConfigError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                      shape_string(b.shape()));
  }
}

void require_rank(const Tensor& a, int rank, const char* op) {
  if (a.rank() != rank) {
    throw ConfigError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                      shape_string(a.shape()));
  }
}

template <class F, class DF>
Tensor unary(const Tensor& a, F f, DF df) {
  const auto in = a.data();
  Buffer out(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = f(in[i]);
  return Tensor::make_result(a.shape(), std::move(out), {&a}, [df](Node& self) {
    auto* ga = grad_of(self, 0);
    if (!ga) return;
    const auto& x = data_of(self, 0);
    for (std::size_t i = 0; i < x.size(); ++i) (*ga)[i] += self.grad[i] * df(x[i], self.data[i]);
  });
}

RowMatrix im2col(std::span<const double> in, int channels, int height, int width, int kernel, int stride,
                 int padding, int out_h, int out_w) {
  RowMatrix cols = RowMatrix::Zero(static_cast<Eigen::Index>(channels) * kernel * kernel,
                                   static_cast<Eigen::Index>(out_h) * out_w);
  for (int c = 0; c < channels; ++c) {
    for (int ki = 0; ki < kernel; ++ki) {
      for (int kj = 0; kj < kernel; ++kj) {
        double* row = cols.row((c * kernel + ki) * kernel + kj).data();
        for (int oy = 0; oy < out_h; ++oy) {
          const int iy = oy * stride - padding + ki;
          if (iy < 0 || iy >= height) continue;
          const double* src = in.data() + (static_cast<std::size_t>(c) * height + iy) * width;
          for (int ox = 0; ox < out_w; ++ox) {
            const int ix = ox * stride - padding + kj;
            if (ix >= 0 && ix < width) row[oy * out_w + ox] = src[ix];
          }
        }
      }
    }
  }
  return cols;
}

void col2im_add(const RowMatrix& cols, Buffer& out, int channels, int height, int width,
                int kernel, int stride, int padding, int out_h, int out_w) {
  for (int c = 0; c < channels; ++c) {
    for (int ki = 0; ki < kernel; ++ki) {
      for (int kj = 0; kj < kernel; ++kj) {
        const double* row = cols.row((c * kernel + ki) * kernel + kj).data();
        for (int oy = 0; oy < out_h; ++oy) {
          const int iy = oy * stride - padding + ki;
          if (iy < 0 || iy >= height) continue;
          double* dst = out.data() + (static_cast<std::size_t>(c) * height + iy) * width;
          for (int ox = 0; ox < out_w; ++ox) {
            const int ix = ox * stride - padding + kj;
            if (ix >= 0 && ix < width) dst[ix] += row[oy * out_w + ox];
          }
        }
      }
    }
  }
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  Buffer out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  return Tensor::make_result(a.shape(), std::move(out), {&a, &b}, [](Node& self) {
    for (std::size_t p = 0; p < 2; ++p) {
      if (auto* g = grad_of(self, p)) {
        for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
      }
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  Buffer out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  return Tensor::make_result(a.shape(), std::move(out), {&a, &b}, [](Node& self) {
    if (auto* g = grad_of(self, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
    }
    if (auto* g = grad_of(self, 1)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] -= self.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  Buffer out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  return Tensor::make_result(a.shape(), std::move(out), {&a, &b}, [](Node& self) {
    const auto& x = data_of(self, 0);
    const auto& y = data_of(self, 1);
    if (auto* g = grad_of(self, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * y[i];
    }
    if (auto* g = grad_of(self, 1)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * x[i];
    }
  });
}

Tensor scale(const Tensor& a, double factor) {
  return unary(a, [factor](double x) { return x * factor; }, [factor](double, double) { return factor; });
}

Tensor neg(const Tensor& a) { return scale(a, -1.0); }

Tensor add_row_bias(const Tensor& x, const Tensor& bias) {
  require_rank(x, 2, "add_row_bias");
  const int rows = x.dim(0);
  const int cols = x.dim(1);
  if (bias.numel() != static_cast<std::size_t>(cols)) {
    throw ConfigError("add_row_bias: bias of " + shape_string(bias.shape()) + " for rows of width " +
                      std::to_string(cols));
  }
  Buffer out(x.data().begin(), x.data().end());
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) out[static_cast<std::size_t>(r) * cols + c] += bias.data()[c];
  }
  return Tensor::make_result(x.shape(), std::move(out), {&x, &bias}, [rows, cols](Node& self) {
    if (auto* g = grad_of(self, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
    }
    if (auto* g = grad_of(self, 1)) {
      for (int r = 0; r < rows; ++r) {
        for (int c = 0; c < cols; ++c) (*g)[c] += self.grad[static_cast<std::size_t>(r) * cols + c];
      }
    }
  });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const int m = a.dim(0);
  const int k = a.dim(1);
  const int n = b.dim(1);
  if (b.dim(0) != k) {
    throw ConfigError("matmul: inner dimensions differ, " + shape_string(a.shape()) + " x " +
                      shape_string(b.shape()));
  }
  Buffer out(static_cast<std::size_t>(m) * n);
  MatrixMap(out.data(), m, n).noalias() = a.matrix() * b.matrix();
  return Tensor::make_result({m, n}, std::move(out), {&a, &b}, [m, k, n](Node& self) {
    ConstMatrixMap dc(self.grad.data(), m, n);
    if (auto* g = grad_of(self, 0)) {
      MatrixMap(g->data(), m, k).noalias() += dc * ConstMatrixMap(data_of(self, 1).data(), k, n).transpose();
    }
    if (auto* g = grad_of(self, 1)) {
      MatrixMap(g->data(), k, n).noalias() += ConstMatrixMap(data_of(self, 0).data(), m, k).transpose() * dc;
    }
  });
}

Tensor transpose(const Tensor& a) {
  require_rank(a, 2, "transpose");
  const int m = a.dim(0);
  const int n = a.dim(1);
  Buffer out(a.numel());
  MatrixMap(out.data(), n, m) = a.matrix().transpose();
  return Tensor::make_result({n, m}, std::move(out), {&a}, [m, n](Node& self) {
    if (auto* g = grad_of(self, 0)) {
      MatrixMap(g->data(), m, n) += ConstMatrixMap(self.grad.data(), n, m).transpose();
    }
  });
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw ConfigError("reshape: " + shape_string(a.shape()) + " to " + shape_string(shape));
  }
  Buffer out(a.data().begin(), a.data().end());
  return Tensor::make_result(std::move(shape), std::move(out), {&a}, [](Node& self) {
    if (auto* g = grad_of(self, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
    }
  });
}

Tensor slice_cols(const Tensor& a, int begin, int end) {
  require_rank(a, 2, "slice_cols");
  const int rows = a.dim(0);
  const int cols = a.dim(1);
  if (begin < 0 || end > cols || begin >= end) {
    throw ConfigError("slice_cols: [" + std::to_string(begin) + "," + std::to_string(end) + ") of " +
                      shape_string(a.shape()));
  }
  const int width = end - begin;
  Buffer out(static_cast<std::size_t>(rows) * width);
  MatrixMap(out.data(), rows, width) = a.matrix().middleCols(begin, width);
  return Tensor::make_result({rows, width}, std::move(out), {&a}, [rows, cols, begin, width](Node& self) {
    if (auto* g = grad_of(self, 0)) {
      MatrixMap(g->data(), rows, cols).middleCols(begin, width) += ConstMatrixMap(self.grad.data(), rows, width);
    }
  });
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ConfigError("concat_cols: no inputs");
  const int rows = parts[0].dim(0);
  int cols = 0;
  std::vector<int> widths;
  for (const Tensor& p : parts) {
    require_rank(p, 2, "concat_cols");
    if (p.dim(0) != rows) throw ConfigError("concat_cols: row count mismatch " + shape_string(p.shape()));
    widths.push_back(p.dim(1));
    cols += p.dim(1);
  }
  Buffer out(static_cast<std::size_t>(rows) * cols);
  MatrixMap dst(out.data(), rows, cols);
  int offset = 0;
  for (const Tensor& p : parts) {
    dst.middleCols(offset, p.dim(1)) = p.matrix();
    offset += p.dim(1);
  }
  return Tensor::make_result({rows, cols}, std::move(out), parts, [rows, cols, widths](Node& self) {
    ConstMatrixMap g_out(self.grad.data(), rows, cols);
    int off = 0;
    for (std::size_t i = 0; i < widths.size(); ++i) {
      if (auto* g = grad_of(self, i)) MatrixMap(g->data(), rows, widths[i]) += g_out.middleCols(off, widths[i]);
      off += widths[i];
    }
  });
}

Tensor slice_rows(const Tensor& a, int begin, int end) {
  require_rank(a, 2, "slice_rows");
  const int rows = a.dim(0);
  const int cols = a.dim(1);
  if (begin < 0 || end > rows || begin >= end) {
    throw ConfigError("slice_rows: [" + std::to_string(begin) + "," + std::to_string(end) + ") of " +
                      shape_string(a.shape()));
  }
  const auto first = static_cast<std::ptrdiff_t>(begin) * cols;
  const auto last = static_cast<std::ptrdiff_t>(end) * cols;
  Buffer out(a.data().begin() + first, a.data().begin() + last);
  return Tensor::make_result({end - begin, cols}, std::move(out), {&a}, [first](Node& self) {
    if (auto* g = grad_of(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[first + i] += self.grad[i];
    }
  });
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ConfigError("concat_rows: no inputs");
  const int cols = parts[0].dim(1);
  int rows = 0;
  std::vector<std::size_t> sizes;
  Buffer out;
  for (const Tensor& p : parts) {
    require_rank(p, 2, "concat_rows");
    if (p.dim(1) != cols) throw ConfigError("concat_rows: column count mismatch " + shape_string(p.shape()));
    rows += p.dim(0);
    sizes.push_back(p.numel());
    out.insert(out.end(), p.data().begin(), p.data().end());
  }
  return Tensor::make_result({rows, cols}, std::move(out), parts, [sizes](Node& self) {
    std::size_t off = 0;
    for (std::size_t i = 0; i < sizes.size(); ++i) {
      if (auto* g = grad_of(self, i)) {
        for (std::size_t j = 0; j < sizes[i]; ++j) (*g)[j] += self.grad[off + j];
      }
      off += sizes[i];
    }
  });
}

Tensor gather_rows(const Tensor& table, std::span<const int> ids) {
  require_rank(table, 2, "gather_rows");
  const int vocab = table.dim(0);
  const int width = table.dim(1);
  std::vector<int> rows(ids.begin(), ids.end());
  Buffer out(rows.size() * static_cast<std::size_t>(width));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= vocab) {
      throw DataError("gather_rows: id " + std::to_string(rows[i]) + " outside [0, " + std::to_string(vocab) + ")");
    }
    std::copy_n(table.data().begin() + static_cast<std::ptrdiff_t>(rows[i]) * width, width,
                out.begin() + static_cast<std::ptrdiff_t>(i) * width);
  }
  return Tensor::make_result({static_cast<int>(rows.size()), width}, std::move(out), {&table},
                             [rows, width](Node& self) {
                               auto* g = grad_of(self, 0);
                               if (!g) return;
                               for (std::size_t i = 0; i < rows.size(); ++i) {
                                 for (int c = 0; c < width; ++c) {
                                   (*g)[static_cast<std::size_t>(rows[i]) * width + c] += self.grad[i * width + c];
                                 }
                               }
                             });
}

Tensor pick(const Tensor& x, std::span<const int> rows, std::span<const int> cols) {
  require_rank(x, 2, "pick");
  if (rows.size() != cols.size()) throw ConfigError("pick: row and column lists differ in length");
  const int width = x.dim(1);
  std::vector<std::size_t> flat(rows.size());
  Buffer out(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= x.dim(0) || cols[i] < 0 || cols[i] >= width) {
      throw DataError("pick: index (" + std::to_string(rows[i]) + "," + std::to_string(cols[i]) + ") outside " +
                      shape_string(x.shape()));
    }
    flat[i] = static_cast<std::size_t>(rows[i]) * width + cols[i];
    out[i] = x.data()[flat[i]];
  }
  return Tensor::make_result({static_cast<int>(out.size())}, std::move(out), {&x}, [flat](Node& self) {
    if (auto* g = grad_of(self, 0)) {
      for (std::size_t i = 0; i < flat.size(); ++i) (*g)[flat[i]] += self.grad[i];
    }
  });
}

Tensor sum(const Tensor& a) {
  double total = 0.0;
  for (double v : a.data()) total += v;
  return Tensor::make_result({}, {total}, {&a}, [](Node& self) {
    if (auto* g = grad_of(self, 0)) {
      for (double& v : *g) v += self.grad[0];
    }
  });
}

Tensor mean(const Tensor& a) {
  if (a.numel() == 0) throw ConfigError("mean of empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.numel()));
}

Tensor abs(const Tensor& a) {
  return unary(
      a, [](double x) { return std::abs(x); },
      [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

Tensor square(const Tensor& a) {
  return unary(a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Tensor relu(const Tensor& a) {
  return unary(a, [](double x) { return x > 0.0 ? x : 0.0; }, [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor gelu(const Tensor& a) {
  return unary(
      a, [](double x) { return 0.5 * x * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0)); },
      [](double x, double) {
        const double cdf = 0.5 * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0));
        const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
        return cdf + x * pdf;
      });
}

Tensor swish(const Tensor& a) {
  return unary(
      a, [](double x) { return x / (1.0 + std::exp(-x)); },
      [](double x, double) {
        const double s = 1.0 / (1.0 + std::exp(-x));
        return s + x * s * (1.0 - s);
      });
}

Tensor tanh(const Tensor& a) {
  return unary(a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

Tensor softmax(const Tensor& x) {
  if (x.rank() < 1) throw ConfigError("softmax of a scalar");
  const int n = x.dim(-1);
  const std::size_t rows = x.numel() / static_cast<std::size_t>(n);
  Buffer out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = x.data().data() + r * n;
    double* o = out.data() + r * n;
    const double peak = *std::max_element(in, in + n);
    if (peak == kNegInf) throw InvalidMaskError("softmax: row " + std::to_string(r) + " has no finite entry");
    double total = 0.0;
    for (int i = 0; i < n; ++i) {
      o[i] = std::exp(in[i] - peak);
      total += o[i];
    }
    for (int i = 0; i < n; ++i) o[i] /= total;
  }
  return Tensor::make_result(x.shape(), std::move(out), {&x}, [n, rows](Node& self) {
    auto* g = grad_of(self, 0);
    if (!g) return;
    for (std::size_t r = 0; r < rows; ++r) {
      const double* p = self.data.data() + r * n;
      const double* up = self.grad.data() + r * n;
      double dot = 0.0;
      for (int i = 0; i < n; ++i) dot += p[i] * up[i];
      for (int i = 0; i < n; ++i) (*g)[r * n + i] += p[i] * (up[i] - dot);
    }
  });
}

Tensor log_softmax(const Tensor& x) {
  if (x.rank() < 1) throw ConfigError("log_softmax of a scalar");
  const int n = x.dim(-1);
  const std::size_t rows = x.numel() / static_cast<std::size_t>(n);
  Buffer out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = x.data().data() + r * n;
    double* o = out.data() + r * n;
    const double peak = *std::max_element(in, in + n);
    if (peak == kNegInf) throw InvalidMaskError("log_softmax: row " + std::to_string(r) + " has no finite entry");
    double total = 0.0;
    for (int i = 0; i < n; ++i) total += std::exp(in[i] - peak);
    const double log_z = peak + std::log(total);
    for (int i = 0; i < n; ++i) o[i] = in[i] - log_z;
  }
  return Tensor::make_result(x.shape(), std::move(out), {&x}, [n, rows](Node& self) {
    auto* g = grad_of(self, 0);
    if (!g) return;
    for (std::size_t r = 0; r < rows; ++r) {
      const double* lp = self.data.data() + r * n;
      const double* up = self.grad.data() + r * n;
      double total = 0.0;
      for (int i = 0; i < n; ++i) total += up[i];
      for (int i = 0; i < n; ++i) (*g)[r * n + i] += up[i] - std::exp(lp[i]) * total;
    }
  });
}

Tensor mask_fill_neg_inf(const Tensor& x, std::span<const std::uint8_t> allow) {
  if (allow.size() != x.numel()) {
    throw ConfigError("mask_fill_neg_inf: mask of " + std::to_string(allow.size()) + " entries for " +
                      shape_string(x.shape()));
  }
  Buffer out(x.data().begin(), x.data().end());
  std::vector<std::uint8_t> keep(allow.begin(), allow.end());
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (!keep[i]) out[i] = kNegInf;
  }
  return Tensor::make_result(x.shape(), std::move(out), {&x}, [keep = std::move(keep)](Node& self) {
    if (auto* g = grad_of(self, 0)) {
      for (std::size_t i = 0; i < keep.size(); ++i) {
        if (keep[i]) (*g)[i] += self.grad[i];
      }
    }
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  require_rank(x, 2, "layer_norm");
  const int rows = x.dim(0);
  const int d = x.dim(1);
  if (gain.numel() != static_cast<std::size_t>(d) || bias.numel() != static_cast<std::size_t>(d)) {
    throw ConfigError("layer_norm: gain/bias must have " + std::to_string(d) + " entries");
  }
  Buffer out(x.numel());
  Buffer xhat(x.numel());
  Buffer rstd(rows);
  for (int r = 0; r < rows; ++r) {
    const double* in = x.data().data() + static_cast<std::size_t>(r) * d;
    double mu = 0.0;
    for (int i = 0; i < d; ++i) mu += in[i];
    mu /= d;
    double var = 0.0;
    for (int i = 0; i < d; ++i) var += (in[i] - mu) * (in[i] - mu);
    var /= d;
    rstd[r] = 1.0 / std::sqrt(var + eps);
    for (int i = 0; i < d; ++i) {
      const std::size_t k = static_cast<std::size_t>(r) * d + i;
      xhat[k] = (in[i] - mu) * rstd[r];
      out[k] = xhat[k] * gain.data()[i] + bias.data()[i];
    }
  }
  return Tensor::make_result(
      x.shape(), std::move(out), {&x, &gain, &bias},
      [rows, d, xhat = std::move(xhat), rstd = std::move(rstd)](Node& self) {
        const auto& g = data_of(self, 1);
        auto* gx = grad_of(self, 0);
        auto* gg = grad_of(self, 1);
        auto* gb = grad_of(self, 2);
        for (int r = 0; r < rows; ++r) {
          const std::size_t base = static_cast<std::size_t>(r) * d;
          double mean_dxhat = 0.0;
          double mean_dxhat_xhat = 0.0;
          for (int i = 0; i < d; ++i) {
            const double up = self.grad[base + i];
            if (gg) (*gg)[i] += up * xhat[base + i];
            if (gb) (*gb)[i] += up;
            const double dxhat = up * g[i];
            mean_dxhat += dxhat;
            mean_dxhat_xhat += dxhat * xhat[base + i];
          }
          if (!gx) continue;
          mean_dxhat /= d;
          mean_dxhat_xhat /= d;
          for (int i = 0; i < d; ++i) {
            const double dxhat = self.grad[base + i] * g[i];
            (*gx)[base + i] += rstd[r] * (dxhat - mean_dxhat - xhat[base + i] * mean_dxhat_xhat);
          }
        }
      });
}

Tensor instance_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, std::span<const std::uint8_t> exclude,
                     double eps) {
  require_rank(x, 3, "instance_norm");
  const int channels = x.dim(0);
  const int plane = x.dim(1) * x.dim(2);
  if (plane < 2) throw ConfigError("instance_norm: needs at least two positions, got " + shape_string(x.shape()));
  if (gain.numel() != static_cast<std::size_t>(channels) || bias.numel() != static_cast<std::size_t>(channels)) {
    throw ConfigError("instance_norm: gain/bias must have " + std::to_string(channels) + " entries");
  }
  if (!exclude.empty() && exclude.size() != static_cast<std::size_t>(plane)) {
    throw ConfigError("instance_norm: exclusion mask of " + std::to_string(exclude.size()) + " for plane " +
                      std::to_string(plane));
  }
  std::vector<std::uint8_t> include(static_cast<std::size_t>(plane), 1);
  int count = plane;
  if (!exclude.empty()) {
    int kept = 0;
    for (int p = 0; p < plane; ++p) kept += exclude[p] ? 0 : 1;
    if (kept > 0) {
      for (int p = 0; p < plane; ++p) include[p] = exclude[p] ? 0 : 1;
      count = kept;
    }
  }

  Buffer out(x.numel());
  Buffer mu(channels);
  Buffer rstd(channels);
  for (int c = 0; c < channels; ++c) {
    const double* in = x.data().data() + static_cast<std::size_t>(c) * plane;
    double m = 0.0;
    for (int p = 0; p < plane; ++p) {
      if (include[p]) m += in[p];
    }
    m /= count;
    double var = 0.0;
    for (int p = 0; p < plane; ++p) {
      if (include[p]) var += (in[p] - m) * (in[p] - m);
    }
    var /= count;
    mu[c] = m;
    rstd[c] = 1.0 / std::sqrt(var + eps);
    for (int p = 0; p < plane; ++p) {
      out[static_cast<std::size_t>(c) * plane + p] = (in[p] - m) * rstd[c] * gain.data()[c] + bias.data()[c];
    }
  }
  return Tensor::make_result(
      x.shape(), std::move(out), {&x, &gain, &bias},
      [channels, plane, count, include = std::move(include), mu = std::move(mu), rstd = std::move(rstd)](Node& self) {
        const auto& in_all = data_of(self, 0);
        const auto& g = data_of(self, 1);
        auto* gx = grad_of(self, 0);
        auto* gg = grad_of(self, 1);
        auto* gb = grad_of(self, 2);
        for (int c = 0; c < channels; ++c) {
          const std::size_t base = static_cast<std::size_t>(c) * plane;
          const double* in = in_all.data() + base;
          const double* up = self.grad.data() + base;
          double sum_up = 0.0;
          double sum_up_centered = 0.0;
          for (int p = 0; p < plane; ++p) {
            sum_up += up[p];
            sum_up_centered += up[p] * (in[p] - mu[c]);
          }
          if (gg) (*gg)[c] += sum_up_centered * rstd[c];
          if (gb) (*gb)[c] += sum_up;
          if (!gx) continue;
          const double r = rstd[c];
          const double a = g[c] * sum_up / count;
          const double b = g[c] * sum_up_centered * r * r / count;
          for (int p = 0; p < plane; ++p) {
            double v = g[c] * up[p];
            if (include[p]) v -= a + (in[p] - mu[c]) * b;
            (*gx)[base + p] += r * v;
          }
        }
      });
}

Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias, int stride, int padding) {
  require_rank(input, 3, "conv2d input");
  require_rank(weight, 4, "conv2d weight");
  const int in_c = input.dim(0);
  const int height = input.dim(1);
  const int width = input.dim(2);
  const int out_c = weight.dim(0);
  const int kernel = weight.dim(2);
  if (weight.dim(1) != in_c || weight.dim(3) != kernel) {
    throw ConfigError("conv2d: weight " + shape_string(weight.shape()) + " incompatible with input " +
                      shape_string(input.shape()));
  }
  if (kernel % 2 == 0) throw ConfigError("conv2d: kernel size " + std::to_string(kernel) + " is not odd");
  if (bias.numel() != static_cast<std::size_t>(out_c)) {
    throw ConfigError("conv2d: bias " + shape_string(bias.shape()) + " for " + std::to_string(out_c) + " outputs");
  }
  if (stride < 1 || padding < 0) throw ConfigError("conv2d: stride must be positive and padding non-negative");
  if (height + 2 * padding < kernel || width + 2 * padding < kernel) {
    throw ConfigError("conv2d: kernel " + std::to_string(kernel) + " larger than padded input " +
                      shape_string(input.shape()));
  }
  const int out_h = (height + 2 * padding - kernel) / stride + 1;
  const int out_w = (width + 2 * padding - kernel) / stride + 1;
  const int patch = in_c * kernel * kernel;
  const int positions = out_h * out_w;

  const RowMatrix cols = im2col(input.data(), in_c, height, width, kernel, stride, padding, out_h, out_w);
  Buffer out(static_cast<std::size_t>(out_c) * positions);
  MatrixMap result(out.data(), out_c, positions);
  result.noalias() = ConstMatrixMap(weight.data().data(), out_c, patch) * cols;
  for (int o = 0; o < out_c; ++o) result.row(o).array() += bias.data()[o];

  return Tensor::make_result(
      {out_c, out_h, out_w}, std::move(out), {&input, &weight, &bias},
      [=](Node& self) {
        ConstMatrixMap dout(self.grad.data(), out_c, positions);
        const auto& in_data = data_of(self, 0);
        const auto& w_data = data_of(self, 1);
        if (auto* gw = grad_of(self, 1)) {
          const RowMatrix c2 = im2col(in_data, in_c, height, width, kernel, stride, padding, out_h, out_w);
          MatrixMap(gw->data(), out_c, patch).noalias() += dout * c2.transpose();
        }
        if (auto* gb = grad_of(self, 2)) {
          for (int o = 0; o < out_c; ++o) (*gb)[o] += dout.row(o).sum();
        }
        if (auto* gi = grad_of(self, 0)) {
          const RowMatrix dcols = ConstMatrixMap(w_data.data(), out_c, patch).transpose() * dout;
          col2im_add(dcols, *gi, in_c, height, width, kernel, stride, padding, out_h, out_w);
        }
      });
}

Tensor max_pool2d(const Tensor& x, int kernel, int stride) {
  require_rank(x, 3, "max_pool2d");
  const int channels = x.dim(0);
  const int height = x.dim(1);
  const int width = x.dim(2);
  if (kernel < 1 || stride < 1 || height < kernel || width < kernel || (height - kernel) % stride != 0 ||
      (width - kernel) % stride != 0) {
    throw ConfigError("max_pool2d: extents " + shape_string(x.shape()) + " not compatible with kernel " +
                      std::to_string(kernel) + " stride " + std::to_string(stride));
  }
  const int out_h = (height - kernel) / stride + 1;
  const int out_w = (width - kernel) / stride + 1;
  Buffer out(static_cast<std::size_t>(channels) * out_h * out_w);
  std::vector<std::size_t> source(out.size());
  for (int c = 0; c < channels; ++c) {
    for (int oy = 0; oy < out_h; ++oy) {
      for (int ox = 0; ox < out_w; ++ox) {
        std::size_t best = (static_cast<std::size_t>(c) * height + oy * stride) * width + ox * stride;
        for (int ky = 0; ky < kernel; ++ky) {
          for (int kx = 0; kx < kernel; ++kx) {
            const std::size_t idx = (static_cast<std::size_t>(c) * height + oy * stride + ky) * width + ox * stride + kx;
            if (x.data()[idx] > x.data()[best]) best = idx;
          }
        }
        const std::size_t o = (static_cast<std::size_t>(c) * out_h + oy) * out_w + ox;
        out[o] = x.data()[best];
        source[o] = best;
      }
    }
  }
  return Tensor::make_result({channels, out_h, out_w}, std::move(out), {&x}, [source = std::move(source)](Node& self) {
    if (auto* g = grad_of(self, 0)) {
      for (std::size_t o = 0; o < source.size(); ++o) (*g)[source[o]] += self.grad[o];
    }
  });
}

Tensor upsample_nearest(const Tensor& x, int factor) {
  require_rank(x, 3, "upsample_nearest");
  if (factor < 1) throw ConfigError("upsample_nearest: factor must be positive");
  const int channels = x.dim(0);
  const int height = x.dim(1);
  const int width = x.dim(2);
  const int out_h = height * factor;
  const int out_w = width * factor;
  Buffer out(static_cast<std::size_t>(channels) * out_h * out_w);
  for (int c = 0; c < channels; ++c) {
    for (int y = 0; y < out_h; ++y) {
      for (int xx = 0; xx < out_w; ++xx) {
        out[(static_cast<std::size_t>(c) * out_h + y) * out_w + xx] =
            x.data()[(static_cast<std::size_t>(c) * height + y / factor) * width + xx / factor];
      }
    }
  }
  return Tensor::make_result({channels, out_h, out_w}, std::move(out), {&x},
                             [=](Node& self) {
                               auto* g = grad_of(self, 0);
                               if (!g) return;
                               for (int c = 0; c < channels; ++c) {
                                 for (int y = 0; y < out_h; ++y) {
                                   for (int xx = 0; xx < out_w; ++xx) {
                                     (*g)[(static_cast<std::size_t>(c) * height + y / factor) * width + xx / factor] +=
                                         self.grad[(static_cast<std::size_t>(c) * out_h + y) * out_w + xx];
                                   }
                                 }
                               }
                             });
}

Tensor select_spatial(std::span<const std::uint8_t> where, const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "select_spatial");
  require_rank(a, 3, "select_spatial");
  const int channels = a.dim(0);
  const std::size_t plane = static_cast<std::size_t>(a.dim(1)) * a.dim(2);
  if (where.size() != plane) {
    throw ConfigError("select_spatial: mask of " + std::to_string(where.size()) + " for plane " +
                      std::to_string(plane));
  }
  std::vector<std::uint8_t> pick_b(where.begin(), where.end());
  Buffer out(a.numel());
  for (int c = 0; c < channels; ++c) {
    for (std::size_t p = 0; p < plane; ++p) {
      const std::size_t i = c * plane + p;
      out[i] = pick_b[p] ? b.data()[i] : a.data()[i];
    }
  }
  return Tensor::make_result(a.shape(), std::move(out), {&a, &b},
                             [channels, plane, pick_b = std::move(pick_b)](Node& self) {
                               auto* ga = grad_of(self, 0);
                               auto* gb = grad_of(self, 1);
                               for (int c = 0; c < channels; ++c) {
                                 for (std::size_t p = 0; p < plane; ++p) {
                                   const std::size_t i = c * plane + p;
                                   auto* target = pick_b[p] ? gb : ga;
                                   if (target) (*target)[i] += self.grad[i];
                                 }
                               }
                             });
}

Tensor scale_spatial(const Tensor& x, std::span<const double> weight) {
  require_rank(x, 3, "scale_spatial");
  const int channels = x.dim(0);
  const std::size_t plane = static_cast<std::size_t>(x.dim(1)) * x.dim(2);
  if (weight.size() != plane) throw ConfigError("scale_spatial: weight size does not match plane");
  Buffer w(weight.begin(), weight.end());
  Buffer out(x.numel());
  for (int c = 0; c < channels; ++c) {
    for (std::size_t p = 0; p < plane; ++p) out[c * plane + p] = x.data()[c * plane + p] * w[p];
  }
  return Tensor::make_result(x.shape(), std::move(out), {&x}, [channels, plane, w = std::move(w)](Node& self) {
    if (auto* g = grad_of(self, 0)) {
      for (int c = 0; c < channels; ++c) {
        for (std::size_t p = 0; p < plane; ++p) (*g)[c * plane + p] += self.grad[c * plane + p] * w[p];
      }
    }
  });
}

Tensor straight_through(const Tensor& input, const Tensor& value) {
  require_same_shape(input, value, "straight_through");
  Buffer out(value.data().begin(), value.data().end());
  return Tensor::make_result(input.shape(), std::move(out), {&input}, [](Node& self) {
    if (auto* g = grad_of(self, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
    }
  });
}

Tensor dropout(const Tensor& x, double rate, Rng& rng) {
  if (rate < 0.0 || rate >= 1.0) throw ConfigError("dropout: rate must lie in [0, 1)");
  if (rate == 0.0) return x;
  const double keep_scale = 1.0 / (1.0 - rate);
  Buffer factor(x.numel());
  for (double& f : factor) f = rng.uniform() < rate ? 0.0 : keep_scale;
  Buffer out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] * factor[i];
  return Tensor::make_result(x.shape(), std::move(out), {&x}, [factor = std::move(factor)](Node& self) {
    if (auto* g = grad_of(self, 0)) {
      for (std::size_t i = 0; i < factor.size(); ++i) (*g)[i] += self.grad[i] * factor[i];
    }
  });
}

}  // namespace lar
