#pragma once

// Convolutional building blocks. A TAConv layer keeps one set of basis
// weights w shared by all branches; branch b synthesizes its kernels against
// the b-th transformed basis, convolves, scales by beta_b, and the branches
// are combined by a per-pixel max:
//
//   TAConv(f) = max_b  beta_b * conv(f, sum_i w_i T_b[psi_i])
//
// With beta = [1, 0, ..., 0] the inactive branches are the zero tensor, so
// relu(TAConv(f)) == relu(conv(f, branch-0 kernels)) exactly. Networks here
// always place a relu right after a TAConv layer or the inner function G of a
// TAResBlock, which is what makes the identity-at-initialization exact.

#include <cmath>
#include <memory>
#include <optional>
#include <vector>

#include "taconv/ops.hpp"
#include "taconv/rng.hpp"
#include "taconv/tensor.hpp"
#include "taconv/transforms.hpp"

namespace taconv {

namespace detail {

inline Tensor param(const Tensor& t, bool track) { return track ? t : t.detach(); }

inline Tensor randn(Shape shape, double stddev, Rng& rng) {
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = stddev * rng.normal();
  return t;
}

inline Tensor initial_beta(std::size_t branches) {
  Tensor beta(Shape{branches}, 0.0);
  beta[0] = 1.0;
  return beta;
}

}  // namespace detail

struct ConvLayer {
  Tensor kernel;              // [O, C, k, k]
  std::optional<Tensor> bias;  // [O]
  int stride = 1;
  int pad = 0;

  static ConvLayer create(int in, int out, int k, int stride, bool with_bias, Rng& rng) {
    ConvLayer l;
    l.kernel = detail::randn(Shape{static_cast<std::size_t>(out), static_cast<std::size_t>(in),
                                   static_cast<std::size_t>(k), static_cast<std::size_t>(k)},
                             std::sqrt(2.0 / (in * k * k)), rng)
                   .set_requires_grad();
    if (with_bias) l.bias = Tensor(Shape{static_cast<std::size_t>(out)}, 0.0).set_requires_grad();
    l.stride = stride;
    l.pad = k / 2;
    return l;
  }

  Tensor forward(Tape* tape, const Tensor& f, bool track = true) const {
    Tensor y = ops::conv2d(tape, f, detail::param(kernel, track), stride, pad);
    if (bias) y = ops::add_channel_bias(tape, y, detail::param(*bias, track));
    return y;
  }
};

struct TAConvLayer {
  Tensor w;     // [O, C, n_basis]
  Tensor beta;  // [B]
  std::shared_ptr<const BasisBank> bank;
  int stride = 1;
  int pad = 0;

  static TAConvLayer create(int in, int out, std::shared_ptr<const BasisBank> bank, int stride, Rng& rng) {
    TAConvLayer l;
    const auto nb = bank->n_basis();
    l.w = detail::randn(Shape{static_cast<std::size_t>(out), static_cast<std::size_t>(in), nb},
                        std::sqrt(2.0 / (in * static_cast<double>(nb))), rng)
              .set_requires_grad();
    l.beta = detail::initial_beta(bank->size()).set_requires_grad();
    l.stride = stride;
    l.pad = bank->k() / 2;
    l.bank = std::move(bank);
    return l;
  }

  std::size_t branches() const { return bank->size(); }

  /// Kernels of branch b, [O, C, k, k].
  Tensor kernels(Tape* tape, std::size_t b, bool track = true) const {
    return ops::basis_combine(tape, detail::param(w, track), bank->branch(b));
  }

  Tensor forward(Tape* tape, const Tensor& f, bool track = true) const {
    if (f.ndim() != 4 || f.dim(1) != w.dim(1)) {
      throw ShapeError("taconv: input " + shape_str(f.shape()) + " does not match weights " + shape_str(w.shape()));
    }
    const Tensor coeffs = detail::param(beta, track);
    std::vector<Tensor> outs;
    outs.reserve(branches());
    for (std::size_t b = 0; b < branches(); ++b) {
      const Tensor y = ops::conv2d(tape, f, kernels(tape, b, track), stride, pad);
      outs.push_back(ops::scale_by(tape, y, coeffs, b));
    }
    return ops::branch_max(tape, outs);
  }
};

namespace detail {

inline Tensor skip_path(Tape* tape, const Tensor& f, const std::optional<Tensor>& proj, bool track) {
  return proj ? ops::conv2d(tape, f, param(*proj, track), 1, 0) : f;
}

inline void check_residual(const Tensor& f, std::size_t in_channels) {
  if (f.ndim() != 4 || f.dim(1) != in_channels) {
    throw ShapeError("resblock: input " + shape_str(f.shape()) + " does not have " + std::to_string(in_channels) +
                     " channels");
  }
}

}  // namespace detail

/// f + G(f), G(f) = relu(conv(relu(conv(f, k1)), k2)); a 1x1 projection maps
/// the skip path when channel counts differ.
struct ResBlock {
  Tensor k1;  // [O, C, k, k]
  Tensor k2;  // [O, O, k, k]
  std::optional<Tensor> proj;  // [O, C, 1, 1]

  static ResBlock create(int in, int out, int k, Rng& rng) {
    ResBlock r;
    const auto ui = static_cast<std::size_t>(in), uo = static_cast<std::size_t>(out), uk = static_cast<std::size_t>(k);
    r.k1 = detail::randn(Shape{uo, ui, uk, uk}, std::sqrt(2.0 / (in * k * k)), rng).set_requires_grad();
    r.k2 = detail::randn(Shape{uo, uo, uk, uk}, std::sqrt(2.0 / (out * k * k)), rng).set_requires_grad();
    if (in != out) r.proj = detail::randn(Shape{uo, ui, 1, 1}, std::sqrt(1.0 / in), rng).set_requires_grad();
    return r;
  }

  Tensor inner(Tape* tape, const Tensor& f, const Tensor& a, const Tensor& b) const {
    const int pad = static_cast<int>(a.dim(2) / 2);
    Tensor h = ops::relu(tape, ops::conv2d(tape, f, a, 1, pad));
    return ops::relu(tape, ops::conv2d(tape, h, b, 1, pad));
  }

  Tensor forward(Tape* tape, const Tensor& f, bool track = true) const {
    detail::check_residual(f, k1.dim(1));
    const Tensor g = inner(tape, f, detail::param(k1, track), detail::param(k2, track));
    return ops::add(tape, detail::skip_path(tape, f, proj, track), g);
  }
};

/// f + max_b beta_b G(f, T_b[k1], T_b[k2]) with basis-parametrized k1, k2
/// and one beta shared by the whole block.
struct TAResBlock {
  Tensor w1;  // [O, C, n_basis]
  Tensor w2;  // [O, O, n_basis]
  Tensor beta;
  std::optional<Tensor> proj;
  std::shared_ptr<const BasisBank> bank;

  static TAResBlock create(int in, int out, std::shared_ptr<const BasisBank> bank, Rng& rng) {
    TAResBlock r;
    const auto nb = bank->n_basis();
    const auto ui = static_cast<std::size_t>(in), uo = static_cast<std::size_t>(out);
    r.w1 = detail::randn(Shape{uo, ui, nb}, std::sqrt(2.0 / (in * static_cast<double>(nb))), rng).set_requires_grad();
    r.w2 = detail::randn(Shape{uo, uo, nb}, std::sqrt(2.0 / (out * static_cast<double>(nb))), rng).set_requires_grad();
    r.beta = detail::initial_beta(bank->size()).set_requires_grad();
    if (in != out) r.proj = detail::randn(Shape{uo, ui, 1, 1}, std::sqrt(1.0 / in), rng).set_requires_grad();
    r.bank = std::move(bank);
    return r;
  }

  std::size_t branches() const { return bank->size(); }

  Tensor kernels(Tape* tape, const Tensor& w, std::size_t b, bool track = true) const {
    return ops::basis_combine(tape, detail::param(w, track), bank->branch(b));
  }

  /// G computed with branch b's kernels, before beta scaling.
  Tensor inner(Tape* tape, const Tensor& f, std::size_t b, bool track = true) const {
    const int pad = bank->k() / 2;
    Tensor h = ops::relu(tape, ops::conv2d(tape, f, kernels(tape, w1, b, track), 1, pad));
    return ops::relu(tape, ops::conv2d(tape, h, kernels(tape, w2, b, track), 1, pad));
  }

  Tensor forward(Tape* tape, const Tensor& f, bool track = true) const {
    detail::check_residual(f, w1.dim(1));
    const Tensor coeffs = detail::param(beta, track);
    std::vector<Tensor> outs;
    for (std::size_t b = 0; b < branches(); ++b) outs.push_back(ops::scale_by(tape, inner(tape, f, b, track), coeffs, b));
    return ops::add(tape, detail::skip_path(tape, f, proj, track), ops::branch_max(tape, outs));
  }
};

}  // namespace taconv
