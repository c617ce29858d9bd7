#pragma once

// Differentiable operations. Every op takes a nullable Tape*; when the tape is
// null or no input requires a gradient, nothing is recorded and the result is
// a plain value.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "taconv/tensor.hpp"

namespace taconv::ops {

namespace detail {

inline bool tracking(const Tape* tape, std::initializer_list<const Tensor*> inputs) {
  if (!tape) return false;
  return std::any_of(inputs.begin(), inputs.end(), [](const Tensor* t) { return t->requires_grad(); });
}

inline void expect_ndim(const Tensor& t, std::size_t n, const char* what) {
  if (t.ndim() != n) {
    throw ShapeError(std::string(what) + ": expected " + std::to_string(n) + "-d tensor, got " +
                     shape_str(t.shape()));
  }
}

inline void expect_finite(const Tensor& t, const char* what) {
  if (!t.all_finite()) throw NumericalError(std::string(what) + ": non-finite values");
}

inline void add_into(std::span<double> dst, std::span<const double> src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

// Output columns [lo, hi) whose input column ox*stride + kx - pad lies in [0, width).
inline void valid_range(long out_w, long width, long stride, long kx, long pad, long& lo, long& hi) {
  const long off = kx - pad;
  lo = off >= 0 ? 0 : (-off + stride - 1) / stride;
  const long last = width - 1 - off;
  hi = last < 0 ? 0 : std::min(out_w, last / stride + 1);
  if (hi < lo) hi = lo;
}

}  // namespace detail

struct Conv2dGeometry {
  std::size_t n, c, h, w, o, k, oh, ow;
  long stride, pad;
};

inline Conv2dGeometry conv2d_geometry(const Tensor& input, const Tensor& kernel, int stride, int pad) {
  detail::expect_ndim(input, 4, "conv2d input");
  detail::expect_ndim(kernel, 4, "conv2d kernel");
  if (stride < 1) throw ShapeError("conv2d: stride must be >= 1");
  if (pad < 0) throw ShapeError("conv2d: pad must be >= 0");
  const auto k = kernel.dim(2);
  if (kernel.dim(3) != k) throw ShapeError("conv2d: kernel must be square, got " + shape_str(kernel.shape()));
  if (k % 2 == 0) throw ShapeError("conv2d: kernel size must be odd, got " + std::to_string(k));
  if (kernel.dim(1) != input.dim(1)) {
    throw ShapeError("conv2d: kernel " + shape_str(kernel.shape()) + " does not match input channels " +
                     shape_str(input.shape()));
  }
  const long h = static_cast<long>(input.dim(2)), w = static_cast<long>(input.dim(3));
  const long span_h = h + 2 * pad - static_cast<long>(k), span_w = w + 2 * pad - static_cast<long>(k);
  if (span_h < 0 || span_w < 0) {
    throw ShapeError("conv2d: kernel " + std::to_string(k) + " larger than padded input " + shape_str(input.shape()));
  }
  return {input.dim(0), input.dim(1), input.dim(2), input.dim(3), kernel.dim(0), k,
          static_cast<std::size_t>(span_h / stride + 1), static_cast<std::size_t>(span_w / stride + 1),
          stride, pad};
}

namespace detail {

// col[r][p], r = (c, ky, kx), p = (n, oy, ox); out-of-image taps are zero.
inline void im2col(const double* in, const Conv2dGeometry& g, std::vector<double>& col) {
  const std::size_t plane = g.oh * g.ow, cols = g.n * plane;
  col.assign(g.c * g.k * g.k * cols, 0.0);
  for (std::size_t c = 0; c < g.c; ++c)
    for (std::size_t ky = 0; ky < g.k; ++ky) {
      long oy_lo, oy_hi;
      valid_range(static_cast<long>(g.oh), static_cast<long>(g.h), g.stride, static_cast<long>(ky), g.pad, oy_lo, oy_hi);
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        long ox_lo, ox_hi;
        valid_range(static_cast<long>(g.ow), static_cast<long>(g.w), g.stride, static_cast<long>(kx), g.pad, ox_lo, ox_hi);
        double* row = col.data() + ((c * g.k + ky) * g.k + kx) * cols;
        for (std::size_t n = 0; n < g.n; ++n) {
          const double* xplane = in + (n * g.c + c) * g.h * g.w;
          for (long oy = oy_lo; oy < oy_hi; ++oy) {
            const double* xrow = xplane + (oy * g.stride + static_cast<long>(ky) - g.pad) * static_cast<long>(g.w) +
                                 static_cast<long>(kx) - g.pad;
            double* dst = row + n * plane + oy * static_cast<long>(g.ow);
            for (long ox = ox_lo; ox < ox_hi; ++ox) dst[ox] = xrow[ox * g.stride];
          }
        }
      }
    }
}

inline void col2im_add(const std::vector<double>& col, const Conv2dGeometry& g, double* gin) {
  const std::size_t plane = g.oh * g.ow, cols = g.n * plane;
  for (std::size_t c = 0; c < g.c; ++c)
    for (std::size_t ky = 0; ky < g.k; ++ky) {
      long oy_lo, oy_hi;
      valid_range(static_cast<long>(g.oh), static_cast<long>(g.h), g.stride, static_cast<long>(ky), g.pad, oy_lo, oy_hi);
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        long ox_lo, ox_hi;
        valid_range(static_cast<long>(g.ow), static_cast<long>(g.w), g.stride, static_cast<long>(kx), g.pad, ox_lo, ox_hi);
        const double* row = col.data() + ((c * g.k + ky) * g.k + kx) * cols;
        for (std::size_t n = 0; n < g.n; ++n) {
          double* gplane = gin + (n * g.c + c) * g.h * g.w;
          for (long oy = oy_lo; oy < oy_hi; ++oy) {
            double* grow = gplane + (oy * g.stride + static_cast<long>(ky) - g.pad) * static_cast<long>(g.w) +
                           static_cast<long>(kx) - g.pad;
            const double* src = row + n * plane + oy * static_cast<long>(g.ow);
            for (long ox = ox_lo; ox < ox_hi; ++ox) grow[ox * g.stride] += src[ox];
          }
        }
      }
    }
}

// Four partial sums keep the loop vectorizable without -ffast-math; the
// summation order is fixed, so results stay bit-reproducible.
inline double dot(const double* a, const double* b, std::size_t n) {
  double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    s0 += a[i] * b[i];
    s1 += a[i + 1] * b[i + 1];
    s2 += a[i + 2] * b[i + 2];
    s3 += a[i + 3] * b[i + 3];
  }
  for (; i < n; ++i) s0 += a[i] * b[i];
  return (s0 + s1) + (s2 + s3);
}

// c[m][p] += sum_r a[m][r] * b[r][p], blocked over p so the output block
// stays cache resident. The r-order of accumulation is fixed.
inline void gemm_accumulate(const double* a, const double* b, double* c, std::size_t m, std::size_t rdim,
                            std::size_t cols) {
  constexpr std::size_t kBlock = 256;
  for (std::size_t p0 = 0; p0 < cols; p0 += kBlock) {
    const std::size_t len = std::min(kBlock, cols - p0);
    for (std::size_t i = 0; i < m; ++i) {
      double* dst = c + i * cols + p0;
      for (std::size_t r = 0; r < rdim; ++r) {
        const double wv = a[i * rdim + r];
        if (wv == 0.0) continue;
        const double* src = b + r * cols + p0;
        for (std::size_t p = 0; p < len; ++p) dst[p] += wv * src[p];
      }
    }
  }
}

}  // namespace detail

/// Cross-correlation (no kernel flip) with zero padding, computed as a
/// batched im2col product.
inline Tensor conv2d(Tape* tape, const Tensor& input, const Tensor& kernel, int stride = 1, int pad = 0) {
  const auto g = conv2d_geometry(input, kernel, stride, pad);
  detail::expect_finite(input, "conv2d input");
  detail::expect_finite(kernel, "conv2d kernel");
  const std::size_t plane = g.oh * g.ow, cols = g.n * plane, rows = g.c * g.k * g.k;
  std::vector<double> col;
  detail::im2col(input.ptr(), g, col);
  std::vector<double> prod(g.o * cols, 0.0);
  detail::gemm_accumulate(kernel.ptr(), col.data(), prod.data(), g.o, rows, cols);
  Tensor out(Shape{g.n, g.o, g.oh, g.ow});
  for (std::size_t n = 0; n < g.n; ++n)
    for (std::size_t o = 0; o < g.o; ++o)
      std::copy_n(prod.data() + o * cols + n * plane, plane, out.ptr() + (n * g.o + o) * plane);
  if (detail::tracking(tape, {&input, &kernel})) {
    out.set_requires_grad();
    Tensor x = input, kt = kernel, yt = out;
    tape->record("conv2d", {input, kernel}, out, [x, kt, yt, g, col = std::move(col)]() mutable {
      const std::size_t plane = g.oh * g.ow, cols = g.n * plane, rows = g.c * g.k * g.k;
      const auto gy = yt.grad();
      std::vector<double> gprod(g.o * cols);
      for (std::size_t n = 0; n < g.n; ++n)
        for (std::size_t o = 0; o < g.o; ++o)
          std::copy_n(gy.data() + (n * g.o + o) * plane, plane, gprod.data() + o * cols + n * plane);
      if (kt.requires_grad()) {
        auto gk = kt.ensure_grad();
        for (std::size_t o = 0; o < g.o; ++o)
          for (std::size_t r = 0; r < rows; ++r)
            gk[o * rows + r] += detail::dot(gprod.data() + o * cols, col.data() + r * cols, cols);
      }
      if (x.requires_grad()) {
        std::vector<double> gcol(rows * cols, 0.0);
        std::vector<double> kt_t(rows * g.o);
        const double* ker = kt.ptr();
        for (std::size_t o = 0; o < g.o; ++o)
          for (std::size_t r = 0; r < rows; ++r) kt_t[r * g.o + o] = ker[o * rows + r];
        detail::gemm_accumulate(kt_t.data(), gprod.data(), gcol.data(), rows, g.o, cols);
        detail::col2im_add(gcol, g, x.ensure_grad().data());
      }
    });
  }
  return out;
}

/// Adds a per-channel bias to an [N,C,H,W] tensor.
inline Tensor add_channel_bias(Tape* tape, const Tensor& x, const Tensor& bias) {
  detail::expect_ndim(x, 4, "add_channel_bias input");
  if (bias.numel() != x.dim(1)) throw ShapeError("add_channel_bias: bias size does not match channels");
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  Tensor out(x.shape());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double b = bias[ch];
      const std::size_t off = (i * c + ch) * hw;
      for (std::size_t p = 0; p < hw; ++p) out[off + p] = x[off + p] + b;
    }
  if (detail::tracking(tape, {&x, &bias})) {
    out.set_requires_grad();
    Tensor xt = x, bt = bias, yt = out;
    tape->record("add_channel_bias", {x, bias}, out, [xt, bt, yt, n, c, hw]() mutable {
      const auto gy = yt.grad();
      if (xt.requires_grad()) detail::add_into(xt.ensure_grad(), gy);
      if (bt.requires_grad()) {
        auto gb = bt.ensure_grad();
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t ch = 0; ch < c; ++ch) {
            double acc = 0.0;
            const std::size_t off = (i * c + ch) * hw;
            for (std::size_t p = 0; p < hw; ++p) acc += gy[off + p];
            gb[ch] += acc;
          }
      }
    });
  }
  return out;
}

/// Elementwise max over branches. The gradient goes to the winning branch;
/// exact ties split it evenly between the tied branches (at initialization
/// every inactive TAConv branch is exactly zero, so each of them gets a share).
inline Tensor branch_max(Tape* tape, const std::vector<Tensor>& branches) {
  if (branches.empty()) throw ShapeError("branch_max: empty branch list");
  const auto& shape = branches.front().shape();
  for (const auto& b : branches) {
    if (b.shape() != shape) {
      throw ShapeError("branch_max: shape mismatch " + shape_str(b.shape()) + " vs " + shape_str(shape));
    }
  }
  const std::size_t size = branches.front().numel();
  Tensor out = branches.front().detach().clone();
  for (std::size_t b = 1; b < branches.size(); ++b) {
    const double* v = branches[b].ptr();
    double* y = out.ptr();
    for (std::size_t i = 0; i < size; ++i) y[i] = std::max(y[i], v[i]);
  }
  bool track = false;
  for (const auto& b : branches) track = track || b.requires_grad();
  if (tape && track) {
    out.set_requires_grad();
    std::vector<Tensor> ins = branches;
    Tensor yt = out;
    tape->record("branch_max", branches, out, [ins, yt]() mutable {
      const auto gy = yt.grad();
      const double* y = yt.ptr();
      std::vector<double*> gs(ins.size(), nullptr);
      for (std::size_t b = 0; b < ins.size(); ++b)
        if (ins[b].requires_grad()) gs[b] = ins[b].ensure_grad().data();
      for (std::size_t i = 0; i < gy.size(); ++i) {
        int ties = 0;
        for (const auto& b : ins) ties += b.ptr()[i] == y[i];
        const double share = gy[i] / ties;
        for (std::size_t b = 0; b < ins.size(); ++b)
          if (gs[b] && ins[b].ptr()[i] == y[i]) gs[b][i] += share;
      }
    });
  }
  return out;
}

/// The backward pass uses the subgradient 1 at x == 0, so gradient reaches the
/// zero-valued branch a branch_max selected (inactive TAConv branches start at
/// exactly zero).
inline Tensor relu(Tape* tape, const Tensor& x) {
  Tensor out(x.shape());
  const double* xv = x.ptr();
  double* y = out.ptr();
  for (std::size_t i = 0; i < x.numel(); ++i) y[i] = xv[i] > 0.0 ? xv[i] : 0.0;
  if (detail::tracking(tape, {&x})) {
    out.set_requires_grad();
    Tensor xt = x, yt = out;
    tape->record("relu", {x}, out, [xt, yt]() mutable {
      const auto gy = yt.grad();
      auto gx = xt.ensure_grad();
      const double* xv = xt.ptr();
      for (std::size_t i = 0; i < gy.size(); ++i)
        if (xv[i] >= 0.0) gx[i] += gy[i];
    });
  }
  return out;
}

inline Tensor add(Tape* tape, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) out[i] = a[i] + b[i];
  if (detail::tracking(tape, {&a, &b})) {
    out.set_requires_grad();
    Tensor at = a, bt = b, yt = out;
    tape->record("add", {a, b}, out, [at, bt, yt]() mutable {
      if (at.requires_grad()) detail::add_into(at.ensure_grad(), yt.grad());
      if (bt.requires_grad()) detail::add_into(bt.ensure_grad(), yt.grad());
    });
  }
  return out;
}

/// x scaled by the single coefficient coeffs[index]; differentiable in both.
inline Tensor scale_by(Tape* tape, const Tensor& x, const Tensor& coeffs, std::size_t index) {
  if (index >= coeffs.numel()) throw ShapeError("scale_by: coefficient index out of range");
  const double c = coeffs[index];
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) out[i] = c * x[i];
  if (detail::tracking(tape, {&x, &coeffs})) {
    out.set_requires_grad();
    Tensor xt = x, ct = coeffs, yt = out;
    tape->record("scale_by", {x, coeffs}, out, [xt, ct, yt, index]() mutable {
      const auto gy = yt.grad();
      if (xt.requires_grad()) {
        auto gx = xt.ensure_grad();
        const double c = ct[index];
        for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += c * gy[i];
      }
      if (ct.requires_grad()) {
        double acc = 0.0;
        for (std::size_t i = 0; i < gy.size(); ++i) acc += gy[i] * xt[i];
        ct.ensure_grad()[index] += acc;
      }
    });
  }
  return out;
}

/// x[N,D] * weight[D,M] + bias[M].
inline Tensor linear(Tape* tape, const Tensor& x, const Tensor& weight, const Tensor& bias) {
  detail::expect_ndim(x, 2, "linear input");
  detail::expect_ndim(weight, 2, "linear weight");
  const std::size_t n = x.dim(0), d = x.dim(1), m = weight.dim(1);
  if (weight.dim(0) != d) {
    throw ShapeError("linear: input " + shape_str(x.shape()) + " does not match weight " + shape_str(weight.shape()));
  }
  if (bias.numel() != m) throw ShapeError("linear: bias size does not match output width");
  Tensor out(Shape{n, m});
  for (std::size_t i = 0; i < n; ++i) {
    double* y = out.ptr() + i * m;
    for (std::size_t j = 0; j < m; ++j) y[j] = bias[j];
    for (std::size_t k = 0; k < d; ++k) {
      const double xv = x[i * d + k];
      const double* wrow = weight.ptr() + k * m;
      for (std::size_t j = 0; j < m; ++j) y[j] += xv * wrow[j];
    }
  }
  if (detail::tracking(tape, {&x, &weight, &bias})) {
    out.set_requires_grad();
    Tensor xt = x, wt = weight, bt = bias, yt = out;
    tape->record("linear", {x, weight, bias}, out, [xt, wt, bt, yt, n, d, m]() mutable {
      const auto gy = yt.grad();
      if (xt.requires_grad()) {
        auto gx = xt.ensure_grad();
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t k = 0; k < d; ++k) {
            double acc = 0.0;
            for (std::size_t j = 0; j < m; ++j) acc += gy[i * m + j] * wt[k * m + j];
            gx[i * d + k] += acc;
          }
      }
      if (wt.requires_grad()) {
        auto gw = wt.ensure_grad();
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t k = 0; k < d; ++k) {
            const double xv = xt[i * d + k];
            for (std::size_t j = 0; j < m; ++j) gw[k * m + j] += xv * gy[i * m + j];
          }
      }
      if (bt.requires_grad()) {
        auto gb = bt.ensure_grad();
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < m; ++j) gb[j] += gy[i * m + j];
      }
    });
  }
  return out;
}

inline Tensor global_avg_pool(Tape* tape, const Tensor& x) {
  detail::expect_ndim(x, 4, "global_avg_pool input");
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (hw == 0) throw ShapeError("global_avg_pool: empty spatial extent");
  Tensor out(Shape{n, c});
  const double inv = 1.0 / static_cast<double>(hw);
  for (std::size_t i = 0; i < n * c; ++i) {
    double acc = 0.0;
    for (std::size_t p = 0; p < hw; ++p) acc += x[i * hw + p];
    out[i] = acc * inv;
  }
  if (detail::tracking(tape, {&x})) {
    out.set_requires_grad();
    Tensor xt = x, yt = out;
    tape->record("global_avg_pool", {x}, out, [xt, yt, n, c, hw, inv]() mutable {
      const auto gy = yt.grad();
      auto gx = xt.ensure_grad();
      for (std::size_t i = 0; i < n * c; ++i) {
        const double g = gy[i] * inv;
        for (std::size_t p = 0; p < hw; ++p) gx[i * hw + p] += g;
      }
    });
  }
  return out;
}

/// Mean over the batch of -log softmax(logits)[label], max-subtracted.
inline Tensor softmax_cross_entropy(Tape* tape, const Tensor& logits, std::span<const int> labels) {
  detail::expect_ndim(logits, 2, "softmax_cross_entropy logits");
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  if (labels.size() != n) throw ShapeError("softmax_cross_entropy: label count does not match batch");
  for (int l : labels) {
    if (l < 0 || static_cast<std::size_t>(l) >= k) {
      throw ShapeError("softmax_cross_entropy: label " + std::to_string(l) + " outside [0," + std::to_string(k) + ")");
    }
  }
  std::vector<double> probs(n * k);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double* z = logits.ptr() + i * k;
    const double zmax = *std::max_element(z, z + k);
    double sum = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      probs[i * k + j] = std::exp(z[j] - zmax);
      sum += probs[i * k + j];
    }
    for (std::size_t j = 0; j < k; ++j) probs[i * k + j] /= sum;
    total += -(z[labels[i]] - zmax - std::log(sum));
  }
  Tensor out = Tensor::scalar(total / static_cast<double>(n));
  if (!out.all_finite()) throw NumericalError("softmax_cross_entropy: non-finite loss");
  if (detail::tracking(tape, {&logits})) {
    out.set_requires_grad();
    Tensor zt = logits, yt = out;
    std::vector<int> lab(labels.begin(), labels.end());
    tape->record("softmax_cross_entropy", {logits}, out,
                 [zt, yt, probs = std::move(probs), lab = std::move(lab), n, k]() mutable {
                   const double g = yt.grad()[0] / static_cast<double>(n);
                   auto gz = zt.ensure_grad();
                   for (std::size_t i = 0; i < n; ++i)
                     for (std::size_t j = 0; j < k; ++j)
                       gz[i * k + j] += g * (probs[i * k + j] - (static_cast<int>(j) == lab[i] ? 1.0 : 0.0));
                 });
  }
  return out;
}

inline Tensor sum(Tape* tape, const Tensor& x) {
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  Tensor out = Tensor::scalar(acc);
  if (detail::tracking(tape, {&x})) {
    out.set_requires_grad();
    Tensor xt = x, yt = out;
    tape->record("sum", {x}, out, [xt, yt]() mutable {
      const double g = yt.grad()[0];
      for (double& v : xt.ensure_grad()) v += g;
    });
  }
  return out;
}

/// out[o,c,:,:] = sum_i weights[o,c,i] * basis[i,:,:]. The basis is a constant.
inline Tensor basis_combine(Tape* tape, const Tensor& weights, const Tensor& basis) {
  detail::expect_ndim(weights, 3, "basis_combine weights");
  detail::expect_ndim(basis, 3, "basis_combine basis");
  const std::size_t o = weights.dim(0), c = weights.dim(1), nb = weights.dim(2);
  if (basis.dim(0) != nb) {
    throw ShapeError("basis_combine: " + std::to_string(nb) + " weights per filter but basis has " +
                     std::to_string(basis.dim(0)) + " functions");
  }
  const std::size_t kh = basis.dim(1), kw = basis.dim(2), kk = kh * kw;
  Tensor out(Shape{o, c, kh, kw});
  for (std::size_t f = 0; f < o * c; ++f) {
    double* y = out.ptr() + f * kk;
    for (std::size_t i = 0; i < nb; ++i) {
      const double wv = weights[f * nb + i];
      const double* psi = basis.ptr() + i * kk;
      for (std::size_t p = 0; p < kk; ++p) y[p] += wv * psi[p];
    }
  }
  if (detail::tracking(tape, {&weights})) {
    out.set_requires_grad();
    Tensor wt = weights, bt = basis, yt = out;
    tape->record("basis_combine", {weights}, out, [wt, bt, yt, o, c, nb, kk]() mutable {
      const auto gy = yt.grad();
      auto gw = wt.ensure_grad();
      for (std::size_t f = 0; f < o * c; ++f)
        for (std::size_t i = 0; i < nb; ++i) {
          double acc = 0.0;
          const double* psi = bt.ptr() + i * kk;
          for (std::size_t p = 0; p < kk; ++p) acc += gy[f * kk + p] * psi[p];
          gw[f * nb + i] += acc;
        }
    });
  }
  return out;
}

}  // namespace taconv::ops
