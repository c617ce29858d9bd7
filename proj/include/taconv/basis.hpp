#pragma once

// Gaussian-Hermite filter basis:
//   psi_nm(x, y) = A / sigma^2 * H_n(x / sigma) * H_m(y / sigma) * exp(-(x^2 + y^2) / (2 sigma^2))
// discretized on a centred k x k pixel grid. Filters are linear combinations
// of the basis functions with trainable weights.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "taconv/error.hpp"
#include "taconv/grid.hpp"
#include "taconv/tensor.hpp"

namespace taconv {

/// Physicists' Hermite polynomial, H_{n+1} = 2x H_n - 2n H_{n-1}.
inline double hermite(int n, double x) {
  if (n < 0) throw ShapeError("hermite: negative order " + std::to_string(n));
  if (n == 0) return 1.0;
  double prev = 1.0, cur = 2.0 * x;
  for (int i = 1; i < n; ++i) {
    const double next = 2.0 * x * cur - 2.0 * i * prev;
    prev = cur;
    cur = next;
  }
  return cur;
}

using HermiteOrder = std::pair<int, int>;

/// (n, m) pairs with n, m < k, sorted by total order n + m, then by n,
/// truncated to `count`. Bounding each order by k - 1 keeps the set linearly
/// independent on a k-point axis; count == k*k gives the complete basis.
inline std::vector<HermiteOrder> default_orders(int k, std::size_t count) {
  std::vector<HermiteOrder> all;
  for (int n = 0; n < k; ++n)
    for (int m = 0; m < k; ++m) all.emplace_back(n, m);
  std::stable_sort(all.begin(), all.end(), [](const HermiteOrder& a, const HermiteOrder& b) {
    const int ta = a.first + a.second, tb = b.first + b.second;
    return ta != tb ? ta < tb : a.first < b.first;
  });
  if (count > all.size()) {
    throw ShapeError("requested " + std::to_string(count) + " basis functions but a " + std::to_string(k) + "x" +
                     std::to_string(k) + " grid supports at most " + std::to_string(all.size()));
  }
  all.resize(count);
  return all;
}

struct BasisSpec {
  int k = 5;
  double sigma = 1.5;
  std::vector<HermiteOrder> orders;
  bool normalize = true;

  static BasisSpec make(int k, double sigma, std::size_t count = 0) {
    BasisSpec spec;
    spec.k = k;
    spec.sigma = sigma;
    spec.orders = default_orders(k, count == 0 ? static_cast<std::size_t>(k) * k : count);
    return spec;
  }

  std::size_t size() const { return orders.size(); }

  void validate() const {
    if (k < 3 || k % 2 == 0) throw ShapeError("basis: k must be odd and >= 3, got " + std::to_string(k));
    if (!(sigma > 0.0)) throw ShapeError("basis: sigma must be positive");
    if (orders.empty()) throw ShapeError("basis: no Hermite orders");
    for (const auto& [n, m] : orders)
      if (n < 0 || m < 0) throw ShapeError("basis: negative Hermite order");
  }
};

inline void to_json(nlohmann::json& j, const BasisSpec& s) {
  nlohmann::json orders = nlohmann::json::array();
  for (const auto& [n, m] : s.orders) orders.push_back({n, m});
  j = {{"k", s.k}, {"sigma", s.sigma}, {"orders", orders}, {"normalize", s.normalize}};
}

inline void from_json(const nlohmann::json& j, BasisSpec& s) {
  s.k = j.at("k").get<int>();
  s.sigma = j.at("sigma").get<double>();
  s.normalize = j.value("normalize", true);
  s.orders.clear();
  for (const auto& o : j.at("orders")) s.orders.emplace_back(o.at(0).get<int>(), o.at(1).get<int>());
}

/// Evaluates every (n, m) function of the spec on the grid -> [n_basis, rows, cols].
/// With normalize set, each function is scaled to unit L2 norm on the grid.
inline Tensor eval_basis(const BasisSpec& spec, const Grid& grid) {
  spec.validate();
  const std::size_t nb = spec.size(), px = grid.size();
  Tensor out(Shape{nb, static_cast<std::size_t>(grid.rows), static_cast<std::size_t>(grid.cols)});
  const double s = spec.sigma;
  for (std::size_t b = 0; b < nb; ++b) {
    const auto [n, m] = spec.orders[b];
    double norm2 = 0.0;
    for (std::size_t p = 0; p < px; ++p) {
      const double x = grid.x[p], y = grid.y[p];
      const double v = hermite(n, x / s) * hermite(m, y / s) * std::exp(-(x * x + y * y) / (2.0 * s * s)) / (s * s);
      out[b * px + p] = v;
      norm2 += v * v;
    }
    if (spec.normalize) {
      if (norm2 == 0.0) throw NumericalError("basis function vanishes on the grid; cannot normalize");
      const double a = 1.0 / std::sqrt(norm2);
      for (std::size_t p = 0; p < px; ++p) out[b * px + p] *= a;
    }
  }
  return out;
}

inline Tensor eval_basis(const BasisSpec& spec) { return eval_basis(spec, make_grid(spec.k)); }

/// kernel = sum_i w_i psi_i, returned as [rows, cols].
inline Tensor synthesize_kernel(std::span<const double> weights, const Tensor& basis) {
  if (basis.ndim() != 3) throw ShapeError("synthesize_kernel: basis must be [n, rows, cols]");
  if (weights.size() != basis.dim(0)) {
    throw ShapeError("synthesize_kernel: " + std::to_string(weights.size()) + " weights for " +
                     std::to_string(basis.dim(0)) + " basis functions");
  }
  const std::size_t px = basis.dim(1) * basis.dim(2);
  Tensor out(Shape{basis.dim(1), basis.dim(2)});
  for (std::size_t i = 0; i < weights.size(); ++i)
    for (std::size_t p = 0; p < px; ++p) out[p] += weights[i] * basis[i * px + p];
  return out;
}

/// Gram matrix G[i][j] = <psi_i, psi_j>, row-major n x n.
inline std::vector<double> gram_matrix(const Tensor& basis) {
  const std::size_t nb = basis.dim(0), px = basis.numel() / nb;
  std::vector<double> g(nb * nb);
  for (std::size_t i = 0; i < nb; ++i)
    for (std::size_t j = 0; j < nb; ++j) {
      double acc = 0.0;
      for (std::size_t p = 0; p < px; ++p) acc += basis[i * px + p] * basis[j * px + p];
      g[i * nb + j] = acc;
    }
  return g;
}

/// Least-squares projection of kernels onto a fixed basis (column-pivoted QR).
class BasisProjector {
 public:
  explicit BasisProjector(const Tensor& basis) : nb_(basis.dim(0)), px_(basis.numel() / basis.dim(0)) {
    Eigen::MatrixXd a(px_, nb_);
    for (std::size_t i = 0; i < nb_; ++i)
      for (std::size_t p = 0; p < px_; ++p) a(static_cast<Eigen::Index>(p), static_cast<Eigen::Index>(i)) = basis[i * px_ + p];
    a_ = a;
    qr_.compute(a);
  }

  std::size_t rank() const { return static_cast<std::size_t>(qr_.rank()); }
  bool full_rank() const { return rank() == nb_; }

  struct Result {
    std::vector<double> weights;
    double relative_residual = 0.0;  // ||A w - kernel|| / ||kernel||, 0 for a zero kernel
  };

  Result project(std::span<const double> kernel) const {
    if (kernel.size() != px_) throw ShapeError("projection: kernel size does not match basis");
    Eigen::VectorXd b(static_cast<Eigen::Index>(px_));
    for (std::size_t p = 0; p < px_; ++p) b(static_cast<Eigen::Index>(p)) = kernel[p];
    Result r;
    const double bn = b.norm();
    if (bn == 0.0) {
      r.weights.assign(nb_, 0.0);
      return r;
    }
    const Eigen::VectorXd w = qr_.solve(b);
    r.weights.assign(w.data(), w.data() + w.size());
    r.relative_residual = (a_ * w - b).norm() / bn;
    return r;
  }

 private:
  std::size_t nb_, px_;
  Eigen::MatrixXd a_;
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr_;
};

/// 2-norm condition number of the Gram matrix.
inline double gram_condition_number(const Tensor& basis) {
  const auto g = gram_matrix(basis);
  const auto nb = static_cast<Eigen::Index>(basis.dim(0));
  Eigen::MatrixXd m(nb, nb);
  for (Eigen::Index i = 0; i < nb; ++i)
    for (Eigen::Index j = 0; j < nb; ++j) m(i, j) = g[static_cast<std::size_t>(i * nb + j)];
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(m);
  const auto& sv = svd.singularValues();
  return sv(0) / sv(sv.size() - 1);
}

}  // namespace taconv
