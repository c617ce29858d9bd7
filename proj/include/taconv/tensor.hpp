#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "taconv/error.hpp"

namespace taconv {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

namespace detail {

struct TensorImpl {
  Shape shape;
  std::shared_ptr<std::vector<double>> storage;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
};

}  // namespace detail

/// Dense row-major double tensor with handle semantics: copies share storage
/// and gradient. Use clone() for an independent deep copy.
class Tensor {
 public:
  Tensor() : Tensor(Shape{0}) {}

  explicit Tensor(Shape shape, double fill = 0.0) : impl_(std::make_shared<detail::TensorImpl>()) {
    impl_->storage = std::make_shared<std::vector<double>>(shape_numel(shape), fill);
    impl_->shape = std::move(shape);
  }

  Tensor(Shape shape, std::vector<double> values) : impl_(std::make_shared<detail::TensorImpl>()) {
    if (shape_numel(shape) != values.size()) {
      throw ShapeError("tensor data size " + std::to_string(values.size()) + " does not match shape " +
                       shape_str(shape));
    }
    impl_->storage = std::make_shared<std::vector<double>>(std::move(values));
    impl_->shape = std::move(shape);
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), 0.0); }
  static Tensor scalar(double v) { return Tensor(Shape{1}, v); }

  const Shape& shape() const { return impl_->shape; }
  std::size_t ndim() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t i) const { return impl_->shape.at(i); }
  std::size_t numel() const { return impl_->storage->size(); }

  std::span<double> data() { return {impl_->storage->data(), impl_->storage->size()}; }
  std::span<const double> data() const { return {impl_->storage->data(), impl_->storage->size()}; }
  double* ptr() { return impl_->storage->data(); }
  const double* ptr() const { return impl_->storage->data(); }

  double& operator[](std::size_t i) { return (*impl_->storage)[i]; }
  double operator[](std::size_t i) const { return (*impl_->storage)[i]; }

  double item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    return (*impl_->storage)[0];
  }

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool on = true) {
    impl_->requires_grad = on;
    return *this;
  }

  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<double> grad() { return impl_->grad; }
  std::span<const double> grad() const { return impl_->grad; }

  // Allocates a zero gradient buffer if none exists.
  std::span<double> ensure_grad() {
    if (impl_->grad.empty()) impl_->grad.assign(numel(), 0.0);
    return impl_->grad;
  }

  void zero_grad() {
    if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
  }
  void drop_grad() { std::vector<double>().swap(impl_->grad); }

  // Shares values, but never participates in differentiation.
  Tensor detach() const {
    Tensor t;
    t.impl_ = std::make_shared<detail::TensorImpl>();
    t.impl_->shape = impl_->shape;
    t.impl_->storage = impl_->storage;
    return t;
  }

  Tensor clone() const {
    Tensor t(impl_->shape, *impl_->storage);
    t.impl_->requires_grad = impl_->requires_grad;
    return t;
  }

  Tensor reshape(Shape shape) const {
    if (shape_numel(shape) != numel()) {
      throw ShapeError("cannot reshape " + shape_str(this->shape()) + " to " + shape_str(shape));
    }
    Tensor t;
    t.impl_ = std::make_shared<detail::TensorImpl>();
    t.impl_->shape = std::move(shape);
    t.impl_->storage = impl_->storage;
    return t;
  }

  bool shares_storage(const Tensor& other) const { return impl_->storage == other.impl_->storage; }
  bool same(const Tensor& other) const { return impl_ == other.impl_; }

  bool all_finite() const {
    return std::all_of(impl_->storage->begin(), impl_->storage->end(), [](double v) { return std::isfinite(v); });
  }

 private:
  std::shared_ptr<detail::TensorImpl> impl_;
};

/// Reverse-mode tape. Ops append nodes in execution order; backward() walks
/// them in exact reverse, so gradient accumulation order is fixed.
class Tape {
 public:
  struct Node {
    std::string op;
    std::vector<Tensor> inputs;
    Tensor output;
    std::function<void()> backward;
  };

  void record(std::string op, std::vector<Tensor> inputs, Tensor output, std::function<void()> backward) {
    nodes_.push_back({std::move(op), std::move(inputs), std::move(output), std::move(backward)});
  }

  std::size_t size() const { return nodes_.size(); }
  const std::vector<Node>& nodes() const { return nodes_; }
  void clear() { nodes_.clear(); }

  void backward(Tensor loss) {
    if (loss.numel() != 1) {
      throw ShapeError("backward() needs a scalar loss, got shape " + shape_str(loss.shape()));
    }
    if (!loss.requires_grad()) throw ShapeError("backward() on a loss that is not on the tape");
    if (!loss.all_finite()) throw NumericalError("non-finite loss");
    loss.ensure_grad()[0] += 1.0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      if (it->output.has_grad()) it->backward();
    }
    for (const auto& node : nodes_) {
      for (const auto& in : node.inputs) {
        const auto g = in.grad();
        if (!std::all_of(g.begin(), g.end(), [](double v) { return std::isfinite(v); })) {
          throw NumericalError("non-finite gradient flowing into '" + node.op + "'");
        }
      }
    }
  }

 private:
  std::vector<Node> nodes_;
};

}  // namespace taconv
