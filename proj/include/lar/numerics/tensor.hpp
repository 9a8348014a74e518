#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace lar {

using Shape = std::vector<int>;
/// Aligned so vectorized reductions peel the same way on every allocation.
using Buffer = std::vector<double, Eigen::aligned_allocator<double>>;

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;

std::size_t shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

namespace detail {

struct Node;
using BackwardFn = std::function<void(Node& self)>;

struct Node {
  Shape shape;
  Buffer data;
  Buffer grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  BackwardFn backward;

  Buffer& ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
    return grad;
  }
};

}  // namespace detail

/// Dense row-major array of doubles with optional reverse-mode gradient tracking.
///
/// A Tensor is a cheap handle; copies share storage. Operations in ops.hpp
/// record a backward closure on their result when any input requires a
/// gradient and gradient recording is enabled on the current thread.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, Buffer values);

  static Tensor scalar(double value);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  int rank() const { return static_cast<int>(shape().size()); }
  int dim(int axis) const;
  std::size_t numel() const;

  std::span<double> data();
  std::span<const double> data() const;
  double item() const;

  bool requires_grad() const;
  Tensor& set_requires_grad(bool on = true);
  bool has_grad() const;
  /// Gradient buffer, zero-filled on first access.
  std::span<double> grad();
  std::span<const double> grad() const;
  void zero_grad();

  /// Runs reverse-mode accumulation from this scalar into every reachable leaf.
  void backward();

  /// Copy of the values with no graph attached.
  Tensor detach() const;

  ConstMatrixMap matrix() const;
  MatrixMap matrix();

  /// Builds an op result. Parents and the closure are kept only when a
  /// gradient will flow.
  static Tensor make_result(Shape shape, Buffer values,
                            std::initializer_list<const Tensor*> parents, detail::BackwardFn fn);
  static Tensor make_result(Shape shape, Buffer values,
                            const std::vector<Tensor>& parents, detail::BackwardFn fn);

  detail::Node* node() const { return node_.get(); }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  std::shared_ptr<detail::Node> node_;
};

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

}  // namespace lar
