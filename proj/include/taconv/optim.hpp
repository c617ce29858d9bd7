#pragma once

#include <cmath>
#include <numbers>
#include <vector>

#include "taconv/error.hpp"
#include "taconv/tensor.hpp"

namespace taconv {

/// SGD with momentum: v = momentum * v + grad, p -= lr * v. Gradients are
/// zeroed after each step.
class Sgd {
 public:
  Sgd(std::vector<Tensor> params, double momentum) : params_(std::move(params)), momentum_(momentum) {
    if (momentum < 0.0 || momentum >= 1.0) throw Error("sgd: momentum must lie in [0, 1)");
    for (const auto& p : params_) velocity_.emplace_back(p.numel(), 0.0);
  }

  void step(double lr) {
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Tensor& p = params_[i];
      if (!p.has_grad()) throw Error("sgd: parameter " + std::to_string(i) + " has no gradient");
      auto data = p.data();
      const auto& g = p.grad();
      auto& v = velocity_[i];
      for (std::size_t j = 0; j < v.size(); ++j) {
        v[j] = momentum_ * v[j] + g[j];
        data[j] -= lr * v[j];
      }
      p.zero_grad();
    }
  }

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> velocity_;
  double momentum_;
};

/// Triangular cyclic schedule between base_lr / 10 and base_lr.
inline double cyclic_lr(double base_lr, std::size_t step, std::size_t half_cycle) {
  if (half_cycle == 0) return base_lr;
  const double pos = static_cast<double>(step % (2 * half_cycle)) / static_cast<double>(half_cycle);
  const double tri = pos <= 1.0 ? pos : 2.0 - pos;
  return base_lr * (0.1 + 0.9 * tri);
}

}  // namespace taconv
