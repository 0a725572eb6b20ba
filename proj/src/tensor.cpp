#include "vitdiv/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_set>

namespace vitdiv {

namespace detail {

struct Node {
  const char* tag = "";
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  BackwardRule rule;
};

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;
  bool requires_grad = false;
  std::shared_ptr<Node> node;
};

}  // namespace detail

namespace {

thread_local bool g_grad_enabled = true;

using detail::Node;
using detail::TensorImpl;

std::shared_ptr<TensorImpl> make_impl(Shape shape, std::vector<double> values, bool requires_grad) {
  if (shape_numel(shape) != values.size()) {
    throw ShapeError("tensor of shape " + shape_str(shape) + " cannot hold " +
                     std::to_string(values.size()) + " elements");
  }
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(values);
  impl->requires_grad = requires_grad;
  return impl;
}

}  // namespace

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

Tensor::Tensor() : impl_(make_impl({}, {0.0}, false)) {}

Tensor::Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  auto n = shape_numel(shape);
  return Tensor(make_impl(std::move(shape), std::vector<double>(n, 0.0), requires_grad));
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  auto n = shape_numel(shape);
  return Tensor(make_impl(std::move(shape), std::vector<double>(n, value), requires_grad));
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  return Tensor(make_impl(std::move(shape), std::move(values), requires_grad));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return Tensor(make_impl({}, {value}, requires_grad));
}

Tensor Tensor::eye(std::size_t n) {
  std::vector<double> v(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) v[i * n + i] = 1.0;
  return Tensor(make_impl({n, n}, std::move(v), false));
}

Tensor Tensor::randn(Shape shape, std::mt19937_64& rng, double stddev, bool requires_grad) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = dist(rng);
  return Tensor(make_impl(std::move(shape), std::move(v), requires_grad));
}

Tensor Tensor::uniform(Shape shape, std::mt19937_64& rng, double lo, double hi,
                       bool requires_grad) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = dist(rng);
  return Tensor(make_impl(std::move(shape), std::move(v), requires_grad));
}

const Shape& Tensor::shape() const { return impl_->shape; }

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= impl_->shape.size()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " +
                     shape_str(impl_->shape));
  }
  return impl_->shape[axis];
}

std::size_t Tensor::numel() const { return impl_->data.size(); }

std::span<const double> Tensor::data() const { return impl_->data; }

std::span<double> Tensor::mutable_data() {
  if (impl_->node) throw std::logic_error("mutable_data() on a non-leaf tensor");
  return impl_->data;
}

double Tensor::item() const {
  if (impl_->data.size() != 1) {
    throw ShapeError("item() on tensor of shape " + shape_str(impl_->shape));
  }
  return impl_->data[0];
}

double Tensor::at(std::size_t i) const { return impl_->data.at(i); }

double Tensor::at(std::size_t i, std::size_t j) const {
  if (rank() != 2) throw ShapeError("at(i, j) on tensor of shape " + shape_str(shape()));
  return impl_->data.at(i * impl_->shape[1] + j);
}

bool Tensor::requires_grad() const { return impl_->requires_grad; }

void Tensor::set_requires_grad(bool flag) {
  if (impl_->node) throw std::logic_error("set_requires_grad() on a non-leaf tensor");
  impl_->requires_grad = flag;
}

bool Tensor::is_leaf() const { return impl_->node == nullptr; }

bool Tensor::has_grad() const { return !impl_->grad.empty(); }

std::span<const double> Tensor::grad() const { return impl_->grad; }

void Tensor::zero_grad() { impl_->grad.clear(); }

void Tensor::scale_grad(double factor) {
  for (double& g : impl_->grad) g *= factor;
}

Tensor Tensor::detach() const { return Tensor(make_impl(impl_->shape, impl_->data, false)); }

const char* Tensor::op_tag() const { return impl_->node ? impl_->node->tag : "leaf"; }

void Tensor::backward() const {
  if (impl_->data.size() != 1) {
    throw ShapeError("backward() requires a scalar loss, got shape " + shape_str(impl_->shape));
  }
  if (!impl_->requires_grad) {
    throw std::logic_error("backward() on a tensor that is not on the tape");
  }

  // Iterative post-order DFS gives a topological order (inputs before outputs).
  std::vector<TensorImpl*> order;
  std::unordered_set<TensorImpl*> visited;
  std::vector<std::pair<TensorImpl*, std::size_t>> stack;
  stack.emplace_back(impl_.get(), 0);
  visited.insert(impl_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (node->node && next < node->node->inputs.size()) {
      TensorImpl* child = node->node->inputs[next++].get();
      if (child->requires_grad && !visited.count(child)) {
        visited.insert(child);
        stack.emplace_back(child, 0);
      }
      continue;
    }
    order.push_back(node);
    stack.pop_back();
  }

  for (auto* t : order) {
    if (t->node) t->grad.assign(t->data.size(), 0.0);
  }
  if (impl_->node) {
    impl_->grad[0] = 1.0;
  } else {
    if (impl_->grad.empty()) impl_->grad.assign(1, 0.0);
    impl_->grad[0] += 1.0;
    return;
  }

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorImpl* t = *it;
    if (!t->node) continue;
    auto contributions = t->node->rule(t->grad, t->data);
    auto& inputs = t->node->inputs;
    for (std::size_t i = 0; i < inputs.size() && i < contributions.size(); ++i) {
      auto& in = *inputs[i];
      auto& g = contributions[i];
      if (!in.requires_grad || g.empty()) continue;
      if (g.size() != in.data.size()) {
        throw std::logic_error(std::string("backward rule of '") + t->node->tag +
                               "' produced a gradient of the wrong size");
      }
      if (in.grad.empty()) in.grad.assign(in.data.size(), 0.0);
      for (std::size_t k = 0; k < g.size(); ++k) in.grad[k] += g[k];
    }
  }
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

bool grad_enabled() { return g_grad_enabled; }

Tensor make_op(const char* tag, Shape shape, std::vector<double> values,
               std::vector<Tensor> inputs, BackwardRule rule) {
  bool track = false;
  if (g_grad_enabled) {
    for (const auto& in : inputs) track = track || in.requires_grad();
  }
  auto impl = make_impl(std::move(shape), std::move(values), track);
  if (track) {
    auto node = std::make_shared<Node>();
    node->tag = tag;
    node->rule = std::move(rule);
    node->inputs.reserve(inputs.size());
    for (auto& in : inputs) node->inputs.push_back(in.impl());
    impl->node = std::move(node);
  }
  return Tensor(std::move(impl));
}

}  // namespace vitdiv
