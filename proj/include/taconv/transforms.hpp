#pragma once

// Perturbation transforms applied to filters (and, through the same field and
// mask constructors, to images). Every transform is linear in the function
// values except the additive noise bump, which is independent of them.

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "taconv/basis.hpp"
#include "taconv/error.hpp"
#include "taconv/grid.hpp"
#include "taconv/rng.hpp"
#include "taconv/tensor.hpp"

namespace taconv {

enum class TransformKind { Identity, RotationScaling, Elastic, GaussianBlur, GaussianNoise, ObjectOcclusion, SnowOcclusion };

inline const std::vector<TransformKind>& all_transform_kinds() {
  static const std::vector<TransformKind> kinds{TransformKind::RotationScaling, TransformKind::Elastic,
                                                TransformKind::GaussianBlur,    TransformKind::GaussianNoise,
                                                TransformKind::ObjectOcclusion, TransformKind::SnowOcclusion};
  return kinds;
}

inline std::string to_string(TransformKind k) {
  switch (k) {
    case TransformKind::Identity: return "identity";
    case TransformKind::RotationScaling: return "rotation_scaling";
    case TransformKind::Elastic: return "elastic";
    case TransformKind::GaussianBlur: return "gaussian_blur";
    case TransformKind::GaussianNoise: return "gaussian_noise";
    case TransformKind::ObjectOcclusion: return "object_occlusion";
    case TransformKind::SnowOcclusion: return "snow_occlusion";
  }
  return "?";
}

inline TransformKind transform_kind_from_string(const std::string& s) {
  for (auto k : {TransformKind::Identity, TransformKind::RotationScaling, TransformKind::Elastic,
                 TransformKind::GaussianBlur, TransformKind::GaussianNoise, TransformKind::ObjectOcclusion,
                 TransformKind::SnowOcclusion}) {
    if (to_string(k) == s) return k;
  }
  if (s == "snow") return TransformKind::SnowOcclusion;
  if (s == "occlusion") return TransformKind::ObjectOcclusion;
  if (s == "blur") return TransformKind::GaussianBlur;
  if (s == "noise") return TransformKind::GaussianNoise;
  throw ShapeError("unknown transform kind '" + s + "'");
}

struct TransformSpec {
  TransformKind kind = TransformKind::Identity;
  double alpha = 0.0;   // intensity
  double theta = 0.0;   // rotation-scaling mix
  double sigma = 1.0;   // elastic bump width / blur width / noise bump width
  double radius = 0.0;  // occlusion radius, pixels
  int n_lines = 0;
  double slope_low = -2.0;
  double slope_high = 3.0;
  int line_length = 0;  // snow streak length along the major axis; 0 = whole grid
  bool random_noise = false;
  std::uint64_t seed = 0;

  void validate() const {
    if (kind == TransformKind::Identity) return;
    if (alpha < 0.0) throw ShapeError("transform: alpha must be >= 0");
    if ((kind == TransformKind::Elastic || kind == TransformKind::GaussianNoise) && !(sigma > 0.0))
      throw ShapeError("transform: sigma must be > 0");
    if (kind == TransformKind::GaussianBlur && sigma < 0.0) throw ShapeError("transform: blur sigma must be >= 0");
    if (radius < 0.0) throw ShapeError("transform: radius must be >= 0");
    if (n_lines < 0) throw ShapeError("transform: n_lines must be >= 0");
    if (!(slope_low < slope_high)) throw ShapeError("transform: slope range must satisfy low < high");
    if (line_length < 0) throw ShapeError("transform: line_length must be >= 0");
  }
};

inline void to_json(nlohmann::json& j, const TransformSpec& s) {
  j = {{"kind", to_string(s.kind)}, {"alpha", s.alpha},         {"theta", s.theta},
       {"sigma", s.sigma},          {"radius", s.radius},       {"n_lines", s.n_lines},
       {"slope_low", s.slope_low},  {"slope_high", s.slope_high}, {"line_length", s.line_length},
       {"random_noise", s.random_noise}, {"seed", s.seed}};
}

inline void from_json(const nlohmann::json& j, TransformSpec& s) {
  s = TransformSpec{};
  s.kind = transform_kind_from_string(j.at("kind").get<std::string>());
  s.alpha = j.value("alpha", 0.0);
  s.theta = j.value("theta", 0.0);
  s.sigma = j.value("sigma", 1.0);
  s.radius = j.value("radius", 0.0);
  s.n_lines = j.value("n_lines", 0);
  s.slope_low = j.value("slope_low", -2.0);
  s.slope_high = j.value("slope_high", 3.0);
  s.line_length = j.value("line_length", 0);
  s.random_noise = j.value("random_noise", false);
  s.seed = j.value("seed", std::uint64_t{0});
}

// ---------------------------------------------------------------------------
// Displacement fields

/// Target coordinate (x', y') for every grid point, in the grid's centred frame.
struct DisplacementField {
  int rows = 0;
  int cols = 0;
  std::vector<double> x;
  std::vector<double> y;
};

inline DisplacementField identity_field(const Grid& grid) { return {grid.rows, grid.cols, grid.x, grid.y}; }

/// x' = x + a (x cos t + y sin t), y' = y + a (-x sin t + y cos t).
/// cos t = 0 gives a first-order rotation, sin t = 0 a pure scaling.
inline DisplacementField displace_rotation_scaling(const Grid& grid, double alpha, double theta) {
  DisplacementField f{grid.rows, grid.cols, grid.x, grid.y};
  const double c = std::cos(theta), s = std::sin(theta);
  for (std::size_t p = 0; p < grid.size(); ++p) {
    const double x = grid.x[p], y = grid.y[p];
    f.x[p] = x + alpha * (x * c + y * s);
    f.y[p] = y + alpha * (-x * s + y * c);
  }
  return f;
}

/// 2x3 affine map as an offset from the identity: (x, y) -> (x, y) + D [x y 1]^T.
struct AffineOffset {
  std::array<std::array<double, 3>, 2> d{};

  std::array<double, 2> apply(double x, double y) const {
    return {x + (d[0][0] * x + d[0][1] * y + d[0][2]), y + (d[1][0] * x + d[1][1] * y + d[1][2])};
  }
};

/// Solves D [p_i; 1] = shift_i for three anchors by Cramer's rule. Returns
/// nullopt for a (near-)collinear anchor triple. Zero shifts give D == 0 exactly.
inline std::optional<AffineOffset> fit_affine_offset(const std::array<std::array<double, 2>, 3>& anchors,
                                                     const std::array<std::array<double, 2>, 3>& shifts) {
  auto det3 = [](const std::array<std::array<double, 3>, 3>& m) {
    return m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0]) +
           m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
  };
  std::array<std::array<double, 3>, 3> m{};
  double scale = 1.0;
  for (int i = 0; i < 3; ++i) {
    m[i] = {anchors[i][0], anchors[i][1], 1.0};
    scale = std::max({scale, std::abs(anchors[i][0]), std::abs(anchors[i][1])});
  }
  const double det = det3(m);
  if (std::abs(det) < 1e-9 * scale * scale) return std::nullopt;
  AffineOffset a;
  for (int out = 0; out < 2; ++out)
    for (int col = 0; col < 3; ++col) {
      auto mc = m;
      for (int i = 0; i < 3; ++i) mc[i][col] = shifts[i][out];
      a.d[out][col] = det3(mc) / det;
    }
  return a;
}

/// 1-D Gaussian density.
inline double gaussian_density(double u, double sigma) {
  return std::exp(-u * u / (2.0 * sigma * sigma)) / std::sqrt(2.0 * std::numbers::pi * sigma * sigma);
}

namespace detail {

// Bilinear sample of a per-pixel quantity at fractional index (fi, fj); the
// index is clamped to the array so the quantity extends flat past the border.
inline double sample_clamped(const std::vector<double>& v, int rows, int cols, double fi, double fj) {
  fi = std::clamp(fi, 0.0, static_cast<double>(rows - 1));
  fj = std::clamp(fj, 0.0, static_cast<double>(cols - 1));
  const int i0 = std::min(static_cast<int>(std::floor(fi)), rows - 1);
  const int j0 = std::min(static_cast<int>(std::floor(fj)), cols - 1);
  const int i1 = std::min(i0 + 1, rows - 1), j1 = std::min(j0 + 1, cols - 1);
  const double ti = fi - i0, tj = fj - j0;
  auto at = [&](int i, int j) { return v[static_cast<std::size_t>(i) * cols + j]; };
  return (1 - ti) * ((1 - tj) * at(i0, j0) + tj * at(i0, j1)) + ti * ((1 - tj) * at(i1, j0) + tj * at(i1, j1));
}

}  // namespace detail

struct ElasticOptions {
  int max_retries = 16;
  // Subtract the composite displacement of the centre so (0,0) stays fixed.
  bool keep_center = true;
};

/// Three-step elastic field:
///  (i)  an affine map fitted to three anchors displaced by U(-alpha, alpha);
///  (ii) the Gaussian-bump displacement x' = x + alpha g(x), y' = y + alpha g(y);
///  (iii) the bump displacement bilinearly interpolated at the affine targets
///        and added to them.
inline DisplacementField displace_elastic(const Grid& grid, double alpha, double sigma, Rng& rng,
                                          const ElasticOptions& opt = {}) {
  if (alpha < 0.0) throw ShapeError("elastic: alpha must be >= 0");
  if (!(sigma > 0.0)) throw ShapeError("elastic: sigma must be > 0");
  const double cx = grid.cx(), cy = grid.cy();
  std::array<std::array<double, 2>, 3> anchors{{{-cx, -cy}, {cx, -cy}, {-cx, cy}}};
  std::optional<AffineOffset> affine;
  for (int attempt = 0; attempt <= opt.max_retries && !affine; ++attempt) {
    if (attempt > 0) {
      for (auto& a : anchors) {
        const auto p = static_cast<std::size_t>(rng.uniform_int(static_cast<std::int64_t>(grid.size())));
        a = {grid.x[p], grid.y[p]};
      }
    }
    std::array<std::array<double, 2>, 3> shifts{};
    for (auto& s : shifts) {
      s[0] = -alpha + 2.0 * alpha * rng.uniform();
      s[1] = -alpha + 2.0 * alpha * rng.uniform();
    }
    affine = fit_affine_offset(anchors, shifts);
  }
  if (!affine) throw NumericalError("elastic: could not find a non-collinear anchor triple");

  std::vector<double> bump_x(grid.size()), bump_y(grid.size());
  for (std::size_t p = 0; p < grid.size(); ++p) {
    bump_x[p] = alpha * gaussian_density(grid.x[p], sigma);
    bump_y[p] = alpha * gaussian_density(grid.y[p], sigma);
  }
  auto composite = [&](double x, double y) -> std::array<double, 2> {
    const auto t = affine->apply(x, y);
    const double fi = t[1] + cy, fj = t[0] + cx;
    return {t[0] + detail::sample_clamped(bump_x, grid.rows, grid.cols, fi, fj),
            t[1] + detail::sample_clamped(bump_y, grid.rows, grid.cols, fi, fj)};
  };
  DisplacementField f{grid.rows, grid.cols, grid.x, grid.y};
  for (std::size_t p = 0; p < grid.size(); ++p) {
    const auto c = composite(grid.x[p], grid.y[p]);
    f.x[p] = c[0];
    f.y[p] = c[1];
  }
  if (opt.keep_center) {
    const auto c0 = composite(0.0, 0.0);
    for (std::size_t p = 0; p < grid.size(); ++p) {
      f.x[p] -= c0[0];
      f.y[p] -= c0[1];
    }
  }
  return f;
}

/// out(p) = func(field(p)), bilinear, zero outside the grid.
inline Plane resample_bilinear(const Plane& func, const DisplacementField& field) {
  if (field.rows != func.rows || field.cols != func.cols) throw ShapeError("resample: field/function size mismatch");
  Plane out(func.rows, func.cols);
  const double cx = 0.5 * (func.cols - 1), cy = 0.5 * (func.rows - 1);
  for (std::size_t p = 0; p < func.size(); ++p) {
    const double fx = field.x[p], fy = field.y[p];
    if (!std::isfinite(fx) || !std::isfinite(fy)) throw NumericalError("resample: non-finite displacement");
    const double fj = fx + cx, fi = fy + cy;
    const double j0d = std::floor(fj), i0d = std::floor(fi);
    if (i0d < -1.0 || j0d < -1.0 || i0d > func.rows || j0d > func.cols) continue;
    const int i0 = static_cast<int>(i0d), j0 = static_cast<int>(j0d);
    const double ti = fi - i0d, tj = fj - j0d;
    out.v[p] = (1 - ti) * ((1 - tj) * func.at_or_zero(i0, j0) + tj * func.at_or_zero(i0, j0 + 1)) +
               ti * ((1 - tj) * func.at_or_zero(i0 + 1, j0) + tj * func.at_or_zero(i0 + 1, j0 + 1));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Blur, noise and masks

/// Normalized 1-D Gaussian taps over an odd support of ceil(6 sigma) pixels.
inline std::vector<double> gaussian_taps(double sigma) {
  int support = static_cast<int>(std::ceil(6.0 * sigma));
  if (support % 2 == 0) ++support;
  const int r = support / 2;
  std::vector<double> taps(static_cast<std::size_t>(support));
  double total = 0.0;
  for (int t = -r; t <= r; ++t) {
    taps[static_cast<std::size_t>(t + r)] = std::exp(-(t * t) / (2.0 * sigma * sigma));
    total += taps[static_cast<std::size_t>(t + r)];
  }
  for (auto& v : taps) v /= total;
  return taps;
}

/// Same-size convolution with a normalized Gaussian, zero padded. The 2-D
/// kernel is the outer product of the 1-D taps and is applied separably.
inline Plane blur_plane(const Plane& func, double sigma) {
  if (sigma < 0.0) throw ShapeError("blur: sigma must be >= 0");
  if (sigma < 1e-6) return func;
  const auto taps = gaussian_taps(sigma);
  const int r = static_cast<int>(taps.size() / 2);
  Plane tmp(func.rows, func.cols), out(func.rows, func.cols);
  for (int i = 0; i < func.rows; ++i)
    for (int j = 0; j < func.cols; ++j) {
      double acc = 0.0;
      for (int t = -r; t <= r; ++t) acc += taps[static_cast<std::size_t>(t + r)] * func.at_or_zero(i, j + t);
      tmp(i, j) = acc;
    }
  for (int i = 0; i < func.rows; ++i)
    for (int j = 0; j < func.cols; ++j) {
      double acc = 0.0;
      for (int t = -r; t <= r; ++t) acc += taps[static_cast<std::size_t>(t + r)] * tmp.at_or_zero(i + t, j);
      out(i, j) = acc;
    }
  return out;
}

/// Centred 2-D Gaussian density 1/(2 pi s^2) exp(-(x^2 + y^2) / (2 s^2)) on the grid.
inline Plane gaussian_bump(const Grid& grid, double sigma) {
  Plane out(grid.rows, grid.cols);
  for (std::size_t p = 0; p < grid.size(); ++p) {
    const double x = grid.x[p], y = grid.y[p];
    out.v[p] = std::exp(-(x * x + y * y) / (2.0 * sigma * sigma)) / (2.0 * std::numbers::pi * sigma * sigma);
  }
  return out;
}

/// func + alpha * G_sigma.
inline Plane noise_plane(const Plane& func, const Grid& grid, double alpha, double sigma) {
  if (!(sigma > 0.0)) throw ShapeError("noise: sigma must be > 0");
  const Plane bump = gaussian_bump(grid, sigma);
  Plane out = func;
  for (std::size_t p = 0; p < out.size(); ++p) out.v[p] += alpha * bump.v[p];
  return out;
}

using Mask = std::vector<unsigned char>;

/// Open disc of the given radius around a centre drawn uniformly over pixel
/// indices; radius 0 hides nothing.
inline Mask occlusion_mask(int rows, int cols, double radius, Rng& rng) {
  if (radius < 0.0) throw ShapeError("occlusion: radius must be >= 0");
  const auto ci = rng.uniform_int(rows), cj = rng.uniform_int(cols);
  Mask m(static_cast<std::size_t>(rows) * cols, 0);
  const double r2 = radius * radius;
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) {
      const double di = static_cast<double>(i - ci), dj = static_cast<double>(j - cj);
      if (di * di + dj * dj < r2) m[static_cast<std::size_t>(i) * cols + j] = 1;
    }
  return m;
}

/// Integer slope drawn uniformly from {low, low+1, ...} below high.
inline double draw_slope(double low, double high, Rng& rng) {
  const auto count = static_cast<std::int64_t>(std::ceil(high - low));
  return low + static_cast<double>(rng.uniform_int(std::max<std::int64_t>(count, 1)));
}

struct LineSegment {
  int row = 0;
  int col = 0;
  double slope = 0.0;  // d(row)/d(col)
  int length = 0;
};

/// Pixels of a 1-pixel-wide segment: integer steps along the major axis from
/// the start pixel, the minor coordinate rounded half away from zero.
inline void rasterize_segment(const LineSegment& s, int rows, int cols, Mask& m) {
  auto put = [&](int i, int j) {
    if (i >= 0 && j >= 0 && i < rows && j < cols) m[static_cast<std::size_t>(i) * cols + j] = 1;
  };
  if (std::abs(s.slope) <= 1.0) {
    for (int t = 0; t < s.length; ++t) put(s.row + static_cast<int>(std::lround(s.slope * t)), s.col + t);
  } else {
    for (int t = 0; t < s.length; ++t) put(s.row + t, s.col + static_cast<int>(std::lround(t / s.slope)));
  }
}

inline std::vector<LineSegment> draw_segments(int rows, int cols, int n_lines, double slope_low, double slope_high,
                                              int length, Rng& rng) {
  std::vector<LineSegment> segs;
  for (int n = 0; n < n_lines; ++n) {
    LineSegment s;
    s.row = static_cast<int>(rng.uniform_int(rows));
    s.col = static_cast<int>(rng.uniform_int(cols));
    s.slope = draw_slope(slope_low, slope_high, rng);
    s.length = length > 0 ? length : std::max(rows, cols);
    segs.push_back(s);
  }
  return segs;
}

inline Mask snow_mask(int rows, int cols, int n_lines, double slope_low, double slope_high, int length, Rng& rng) {
  if (n_lines < 0) throw ShapeError("snow: n_lines must be >= 0");
  Mask m(static_cast<std::size_t>(rows) * cols, 0);
  for (const auto& s : draw_segments(rows, cols, n_lines, slope_low, slope_high, length, rng))
    rasterize_segment(s, rows, cols, m);
  return m;
}

inline Plane apply_mask(const Plane& func, const Mask& m, double fill) {
  Plane out = func;
  for (std::size_t p = 0; p < out.size(); ++p)
    if (m[p]) out.v[p] = fill;
  return out;
}

inline Plane blur_basis(const Plane& func, double sigma_b) { return blur_plane(func, sigma_b); }

inline Plane noise_basis(const Plane& func, double alpha, double sigma) {
  return noise_plane(func, make_grid(func.rows, func.cols), alpha, sigma);
}

inline Plane occlude_basis(const Plane& func, double radius, Rng& rng) {
  return apply_mask(func, occlusion_mask(func.rows, func.cols, radius, rng), 0.0);
}

inline Plane snow_basis(const Plane& func, int n_lines, double slope_low, double slope_high, Rng& rng,
                        int length = 0) {
  return apply_mask(func, snow_mask(func.rows, func.cols, n_lines, slope_low, slope_high, length, rng), 0.0);
}

// ---------------------------------------------------------------------------
// Materialized transform: all random draws happen once at construction, so
// the same operator is applied to every basis function of a branch.

class FilterTransform {
 public:
  FilterTransform(const TransformSpec& spec, int rows, int cols) : spec_(spec), rows_(rows), cols_(cols) {
    spec.validate();
    const Grid grid = make_grid(rows, cols);
    Rng rng(spec.seed);
    switch (spec.kind) {
      case TransformKind::Identity: break;
      case TransformKind::RotationScaling: field_ = displace_rotation_scaling(grid, spec.alpha, spec.theta); break;
      case TransformKind::Elastic: field_ = displace_elastic(grid, spec.alpha, spec.sigma, rng); break;
      case TransformKind::GaussianBlur: break;
      case TransformKind::GaussianNoise:
        if (spec.random_noise) {
          additive_ = Plane(rows, cols);
          for (auto& v : additive_.v) v = spec.alpha * rng.normal();
        } else {
          additive_ = gaussian_bump(grid, spec.sigma);
          for (auto& v : additive_.v) v *= spec.alpha;
        }
        break;
      case TransformKind::ObjectOcclusion: mask_ = occlusion_mask(rows, cols, spec.radius, rng); break;
      case TransformKind::SnowOcclusion:
        mask_ = snow_mask(rows, cols, spec.n_lines, spec.slope_low, spec.slope_high, spec.line_length, rng);
        break;
    }
  }

  const TransformSpec& spec() const { return spec_; }
  const DisplacementField& field() const { return field_; }
  const Mask& mask() const { return mask_; }
  // The w-independent term (noise bump); empty for the linear kinds.
  const Plane& additive() const { return additive_; }

  Plane apply(const Plane& func) const {
    if (func.rows != rows_ || func.cols != cols_) throw ShapeError("transform: plane size mismatch");
    switch (spec_.kind) {
      case TransformKind::Identity: return func;
      case TransformKind::RotationScaling:
      case TransformKind::Elastic: return resample_bilinear(func, field_);
      case TransformKind::GaussianBlur: return blur_plane(func, spec_.sigma);
      case TransformKind::GaussianNoise: {
        Plane out = func;
        for (std::size_t p = 0; p < out.size(); ++p) out.v[p] += additive_.v[p];
        return out;
      }
      case TransformKind::ObjectOcclusion:
      case TransformKind::SnowOcclusion: return apply_mask(func, mask_, 0.0);
    }
    return func;
  }

 private:
  TransformSpec spec_;
  int rows_, cols_;
  DisplacementField field_;
  Mask mask_;
  Plane additive_;
};

// ---------------------------------------------------------------------------
// Basis bank

/// Basis stacks per branch: branch 0 is the untransformed basis, branch b >= 1
/// the basis under branch_specs[b]. Immutable once built.
class BasisBank {
 public:
  BasisBank(BasisSpec basis, std::vector<TransformSpec> specs, std::vector<Tensor> branches)
      : basis_(std::move(basis)), specs_(std::move(specs)), branches_(std::move(branches)) {}

  std::size_t size() const { return branches_.size(); }
  std::size_t n_basis() const { return branches_.front().dim(0); }
  int k() const { return static_cast<int>(branches_.front().dim(1)); }
  const Tensor& branch(std::size_t b) const { return branches_.at(b); }
  const std::vector<TransformSpec>& branch_specs() const { return specs_; }
  const BasisSpec& basis_spec() const { return basis_; }
  TransformKind kind() const { return specs_.size() > 1 ? specs_[1].kind : TransformKind::Identity; }

 private:
  BasisSpec basis_;
  std::vector<TransformSpec> specs_;
  std::vector<Tensor> branches_;
};

inline Plane basis_plane(const Tensor& basis, std::size_t i) {
  const int rows = static_cast<int>(basis.dim(1)), cols = static_cast<int>(basis.dim(2));
  const std::size_t px = static_cast<std::size_t>(rows) * cols;
  return Plane(rows, cols, std::vector<double>(basis.data().begin() + static_cast<long>(i * px),
                                               basis.data().begin() + static_cast<long>((i + 1) * px)));
}

/// Branch 0 = base; branch b = every basis function under branch_params[b-1].
inline BasisBank build_transform_bank(const Tensor& base, TransformKind kind,
                                      const std::vector<TransformSpec>& branch_params,
                                      const BasisSpec& basis_spec = {}) {
  if (base.ndim() != 3) throw ShapeError("bank: base basis must be [n, k, k]");
  for (const auto& s : branch_params) {
    if (s.kind != kind) {
      throw ShapeError("bank: mixed transform kinds (" + to_string(s.kind) + " in a " + to_string(kind) + " bank)");
    }
  }
  const int rows = static_cast<int>(base.dim(1)), cols = static_cast<int>(base.dim(2));
  const std::size_t nb = base.dim(0), px = static_cast<std::size_t>(rows) * cols;
  std::vector<TransformSpec> specs{TransformSpec{}};
  std::vector<Tensor> branches{base.detach().clone()};
  for (const auto& s : branch_params) {
    const FilterTransform t(s, rows, cols);
    Tensor br(base.shape());
    for (std::size_t i = 0; i < nb; ++i) {
      const Plane out = t.apply(basis_plane(base, i));
      std::copy(out.v.begin(), out.v.end(), br.data().begin() + static_cast<long>(i * px));
    }
    specs.push_back(s);
    branches.push_back(std::move(br));
  }
  return BasisBank(basis_spec, std::move(specs), std::move(branches));
}

/// Default per-branch parameters: a geometric ramp of the kind's intensity
/// (doubling per branch) with per-branch seeds.
inline std::vector<TransformSpec> default_branch_specs(TransformKind kind, int count, std::uint64_t seed) {
  std::vector<TransformSpec> out;
  for (int b = 0; b < count; ++b) {
    const double ramp = std::pow(2.0, b);
    TransformSpec s;
    s.kind = kind;
    s.seed = derive_seed(seed, {static_cast<std::uint64_t>(kind), static_cast<std::uint64_t>(b)});
    switch (kind) {
      case TransformKind::Identity: break;
      case TransformKind::RotationScaling:
        s.alpha = 0.1 * ramp;
        s.theta = b * std::numbers::pi / 2.0;
        break;
      case TransformKind::Elastic:
        s.alpha = 0.25 * ramp;
        s.sigma = 1.0;
        break;
      case TransformKind::GaussianBlur: s.sigma = 0.3 * ramp; break;
      case TransformKind::GaussianNoise:
        s.alpha = 0.25 * ramp;
        s.sigma = 1.0;
        break;
      case TransformKind::ObjectOcclusion: s.radius = 0.5 * (b + 1); break;
      case TransformKind::SnowOcclusion:
        s.n_lines = b / 2 + 1;
        s.slope_low = -2.0;
        s.slope_high = 3.0;
        break;
    }
    out.push_back(s);
  }
  return out;
}

/// Serializable description of a bank; rebuilding from it is bit-exact.
struct BankSpec {
  BasisSpec basis;
  TransformKind kind = TransformKind::Identity;
  std::vector<TransformSpec> branches;  // B - 1 entries

  BasisBank build() const { return build_transform_bank(eval_basis(basis), kind, branches, basis); }
};

inline void to_json(nlohmann::json& j, const BankSpec& s) {
  j = {{"basis", s.basis}, {"kind", to_string(s.kind)}, {"branches", s.branches}};
}

inline void from_json(const nlohmann::json& j, BankSpec& s) {
  s.basis = j.at("basis").get<BasisSpec>();
  s.kind = transform_kind_from_string(j.at("kind").get<std::string>());
  s.branches = j.at("branches").get<std::vector<TransformSpec>>();
}

inline BankSpec make_bank_spec(const BasisSpec& basis, TransformKind kind, int extra_branches, std::uint64_t seed) {
  BankSpec s;
  s.basis = basis;
  s.kind = kind;
  if (kind != TransformKind::Identity) s.branches = default_branch_specs(kind, extra_branches, seed);
  return s;
}

}  // namespace taconv
