#include "lar/numerics/tensor.hpp"

#include "lar/error.hpp"

#include <sstream>
#include <unordered_set>

namespace lar {

namespace {
thread_local bool g_grad_enabled = true;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (int extent : shape) {
    if (extent < 0) throw ConfigError("negative extent in shape " + shape_string(shape));
    n *= static_cast<std::size_t>(extent);
  }
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) out << (i ? "," : "") << shape[i];
  out << ']';
  return out.str();
}

Tensor::Tensor(Shape shape, double fill) : node_(std::make_shared<detail::Node>()) {
  node_->data.assign(shape_numel(shape), fill);
  node_->shape = std::move(shape);
}

Tensor::Tensor(Shape shape, Buffer values) : node_(std::make_shared<detail::Node>()) {
  if (values.size() != shape_numel(shape)) {
    throw ConfigError("tensor of shape " + shape_string(shape) + " given " +
                      std::to_string(values.size()) + " values");
  }
  node_->shape = std::move(shape);
  node_->data = std::move(values);
}

Tensor Tensor::scalar(double value) { return Tensor(Shape{}, Buffer{value}); }

const Shape& Tensor::shape() const { return node_->shape; }

int Tensor::dim(int axis) const {
  const auto& s = node_->shape;
  if (axis < 0) axis += static_cast<int>(s.size());
  if (axis < 0 || axis >= static_cast<int>(s.size())) {
    throw ConfigError("axis " + std::to_string(axis) + " out of range for shape " + shape_string(s));
  }
  return s[static_cast<std::size_t>(axis)];
}

std::size_t Tensor::numel() const { return node_->data.size(); }

std::span<double> Tensor::data() { return node_->data; }
std::span<const double> Tensor::data() const { return node_->data; }

double Tensor::item() const {
  if (numel() != 1) throw ConfigError("item() on tensor of shape " + shape_string(shape()));
  return node_->data[0];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool on) {
  node_->requires_grad = on;
  return *this;
}

bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }

std::span<double> Tensor::grad() { return node_->ensure_grad(); }
std::span<const double> Tensor::grad() const { return node_->ensure_grad(); }

void Tensor::zero_grad() {
  if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

void Tensor::backward() {
  if (numel() != 1) throw ConfigError("backward() needs a scalar, got " + shape_string(shape()));
  if (!node_->requires_grad) return;

  // Iterative post-order DFS gives a topological order without recursion limits.
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> visited;
  std::vector<std::pair<detail::Node*, std::size_t>> stack{{node_.get(), 0}};
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      detail::Node* parent = node->parents[next++].get();
      if (parent->requires_grad && visited.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  node_->ensure_grad()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* node = *it;
    if (node->backward && !node->grad.empty()) node->backward(*node);
  }
}

Tensor Tensor::detach() const { return Tensor(node_->shape, node_->data); }

ConstMatrixMap Tensor::matrix() const {
  if (rank() != 2) throw ConfigError("matrix view of non-2D tensor " + shape_string(shape()));
  return ConstMatrixMap(node_->data.data(), node_->shape[0], node_->shape[1]);
}

MatrixMap Tensor::matrix() {
  if (rank() != 2) throw ConfigError("matrix view of non-2D tensor " + shape_string(shape()));
  return MatrixMap(node_->data.data(), node_->shape[0], node_->shape[1]);
}

Tensor Tensor::make_result(Shape shape, Buffer values,
                           std::initializer_list<const Tensor*> parents, detail::BackwardFn fn) {
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->data = std::move(values);
  if (g_grad_enabled) {
    bool any = false;
    for (const Tensor* p : parents) any = any || p->requires_grad();
    if (any) {
      node->requires_grad = true;
      for (const Tensor* p : parents) node->parents.push_back(p->node_);
      node->backward = std::move(fn);
    }
  }
  return Tensor(std::move(node));
}

Tensor Tensor::make_result(Shape shape, Buffer values,
                           const std::vector<Tensor>& parents, detail::BackwardFn fn) {
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->data = std::move(values);
  if (g_grad_enabled) {
    bool any = false;
    for (const Tensor& p : parents) any = any || p.requires_grad();
    if (any) {
      node->requires_grad = true;
      for (const Tensor& p : parents) node->parents.push_back(p.node_);
      node->backward = std::move(fn);
    }
  }
  return Tensor(std::move(node));
}

}  // namespace lar
