#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "taconv/rng.hpp"
#include "taconv/tensor.hpp"

namespace taconv::testing {

inline Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

/// Plain nested-loop cross-correlation, zero padding.
inline Tensor conv2d_oracle(const Tensor& in, const Tensor& k, int stride, int pad) {
  const long n = static_cast<long>(in.dim(0)), c = static_cast<long>(in.dim(1)), h = static_cast<long>(in.dim(2)),
             w = static_cast<long>(in.dim(3));
  const long o = static_cast<long>(k.dim(0)), kk = static_cast<long>(k.dim(2));
  const long ho = (h + 2 * pad - kk) / stride + 1, wo = (w + 2 * pad - kk) / stride + 1;
  Tensor out(Shape{static_cast<std::size_t>(n), static_cast<std::size_t>(o), static_cast<std::size_t>(ho),
                   static_cast<std::size_t>(wo)});
  for (long b = 0; b < n; ++b)
    for (long oc = 0; oc < o; ++oc)
      for (long i = 0; i < ho; ++i)
        for (long j = 0; j < wo; ++j) {
          double acc = 0.0;
          for (long ic = 0; ic < c; ++ic)
            for (long u = 0; u < kk; ++u)
              for (long v = 0; v < kk; ++v) {
                const long y = i * stride + u - pad, x = j * stride + v - pad;
                if (y < 0 || x < 0 || y >= h || x >= w) continue;
                acc += in[static_cast<std::size_t>(((b * c + ic) * h + y) * w + x)] *
                       k[static_cast<std::size_t>(((oc * c + ic) * kk + u) * kk + v)];
              }
          out[static_cast<std::size_t>(((b * o + oc) * ho + i) * wo + j)] = acc;
        }
  return out;
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

inline double rel_err(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-6});
}

struct GradCheck {
  double worst = 0.0;
  std::size_t checked = 0;
};

/// Central finite differences (step h) against the tape gradient for the
/// listed entries of `params`. `loss` builds the scalar on the given tape.
inline GradCheck grad_check(const std::function<Tensor(Tape*)>& loss, std::vector<Tensor> params,
                            const std::vector<std::pair<std::size_t, std::size_t>>& entries, double h = 1e-5) {
  for (auto& p : params) {
    p.set_requires_grad();
    p.drop_grad();
  }
  Tape tape;
  tape.backward(loss(&tape));
  GradCheck r;
  for (const auto& [pi, ei] : entries) {
    Tensor& p = params[pi];
    const double analytic = p.has_grad() ? p.grad()[ei] : 0.0;
    const double orig = p[ei];
    p[ei] = orig + h;
    const double up = loss(nullptr).item();
    p[ei] = orig - h;
    const double down = loss(nullptr).item();
    p[ei] = orig;
    r.worst = std::max(r.worst, rel_err(analytic, (up - down) / (2.0 * h)));
    ++r.checked;
  }
  return r;
}

/// Every entry of every parameter.
inline std::vector<std::pair<std::size_t, std::size_t>> all_entries(const std::vector<Tensor>& params) {
  std::vector<std::pair<std::size_t, std::size_t>> e;
  for (std::size_t p = 0; p < params.size(); ++p)
    for (std::size_t i = 0; i < params[p].numel(); ++i) e.emplace_back(p, i);
  return e;
}

/// `count` entries drawn uniformly over all parameters' entries.
inline std::vector<std::pair<std::size_t, std::size_t>> sample_entries(const std::vector<Tensor>& params,
                                                                       std::size_t count, Rng& rng) {
  const auto all = all_entries(params);
  std::vector<std::pair<std::size_t, std::size_t>> e;
  for (std::size_t i = 0; i < count; ++i)
    e.push_back(all[static_cast<std::size_t>(rng.uniform_int(static_cast<std::int64_t>(all.size())))]);
  return e;
}

}  // namespace taconv::testing
