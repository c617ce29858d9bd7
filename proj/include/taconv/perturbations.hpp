#pragma once

// Image-space perturbations in [0, 1] pixel scale and the basic iterative
// method (BIM) attack. Every kind is the identity at severity 0 and clips
// its output to [0, 1].

#include <algorithm>
#include <cmath>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "taconv/dataset.hpp"
#include "taconv/error.hpp"
#include "taconv/grid.hpp"
#include "taconv/network.hpp"
#include "taconv/ops.hpp"
#include "taconv/rng.hpp"
#include "taconv/transforms.hpp"

namespace taconv {

enum class PerturbationKind {
  RotationScaling,
  Elastic,
  GaussianBlur,
  GaussianNoise,
  ObjectOcclusion,
  Snow,
  Wave,
  Saturation,
  Adversarial
};

inline std::string to_string(PerturbationKind k) {
  switch (k) {
    case PerturbationKind::RotationScaling: return "rotation_scaling";
    case PerturbationKind::Elastic: return "elastic";
    case PerturbationKind::GaussianBlur: return "gaussian_blur";
    case PerturbationKind::GaussianNoise: return "gaussian_noise";
    case PerturbationKind::ObjectOcclusion: return "object_occlusion";
    case PerturbationKind::Snow: return "snow_occlusion";
    case PerturbationKind::Wave: return "wave";
    case PerturbationKind::Saturation: return "saturation";
    case PerturbationKind::Adversarial: return "adversarial";
  }
  return "?";
}

inline const std::vector<PerturbationKind>& natural_kinds() {
  static const std::vector<PerturbationKind> k{PerturbationKind::RotationScaling, PerturbationKind::Elastic,
                                               PerturbationKind::GaussianBlur,    PerturbationKind::GaussianNoise,
                                               PerturbationKind::ObjectOcclusion, PerturbationKind::Snow};
  return k;
}

inline PerturbationKind perturbation_kind_from_string(const std::string& s) {
  for (auto k : {PerturbationKind::RotationScaling, PerturbationKind::Elastic, PerturbationKind::GaussianBlur,
                 PerturbationKind::GaussianNoise, PerturbationKind::ObjectOcclusion, PerturbationKind::Snow,
                 PerturbationKind::Wave, PerturbationKind::Saturation, PerturbationKind::Adversarial}) {
    if (to_string(k) == s) return k;
  }
  if (s == "snow") return PerturbationKind::Snow;
  if (s == "occlusion") return PerturbationKind::ObjectOcclusion;
  if (s == "blur") return PerturbationKind::GaussianBlur;
  if (s == "noise") return PerturbationKind::GaussianNoise;
  if (s == "bim") return PerturbationKind::Adversarial;
  throw DataError("unknown perturbation kind '" + s + "'");
}

/// Filter transform that mirrors an image perturbation, if any.
inline std::optional<TransformKind> matching_transform(PerturbationKind k) {
  switch (k) {
    case PerturbationKind::RotationScaling: return TransformKind::RotationScaling;
    case PerturbationKind::Elastic: return TransformKind::Elastic;
    case PerturbationKind::GaussianBlur: return TransformKind::GaussianBlur;
    case PerturbationKind::GaussianNoise: return TransformKind::GaussianNoise;
    case PerturbationKind::ObjectOcclusion: return TransformKind::ObjectOcclusion;
    case PerturbationKind::Snow: return TransformKind::SnowOcclusion;
    default: return std::nullopt;
  }
}

struct AttackSpec {
  double epsilon = 0.0;    // l-inf budget in [0, 1] pixel units
  int steps = 10;
  double step_size = 0.0;  // 0 -> 2.5 * epsilon / steps

  double resolved_step() const { return step_size > 0.0 ? step_size : 2.5 * epsilon / steps; }

  void validate() const {
    if (!(epsilon >= 0.0)) throw ShapeError("attack: epsilon must be >= 0");
    if (steps < 1) throw ShapeError("attack: steps must be >= 1");
    if (step_size < 0.0) throw ShapeError("attack: step_size must be >= 0");
    if (resolved_step() * steps < epsilon * (1.0 - 1e-12)) throw ShapeError("attack: step_size * steps < epsilon");
  }
};

struct PerturbationSpec {
  PerturbationKind kind = PerturbationKind::GaussianNoise;
  double severity = 0.0;
  std::uint64_t seed = 0;
  // kind-specific
  double theta = std::numbers::pi / 4;  // rotation-scaling angle
  double elastic_sigma = 3.0;           // bump width, pixels
  double slope_low = -2.0;              // snow streak slopes
  double slope_high = 3.0;
  int line_length = 0;                  // snow streak length, 0 -> a sixth of the larger side (>= 2)
  double fill = 0.5;                    // occluder gray level
  double wavelength = 8.0;              // wave period, pixels
  int attack_steps = 10;
  double attack_step_size = 0.0;

  AttackSpec attack() const { return {severity, attack_steps, attack_step_size}; }

  void validate() const {
    if (!(severity >= 0.0) || !std::isfinite(severity)) throw ShapeError(to_string(kind) + ": severity must be >= 0");
    if (!(elastic_sigma > 0.0)) throw ShapeError("elastic_sigma must be > 0");
    if (!(wavelength > 0.0)) throw ShapeError("wavelength must be > 0");
    if (slope_high <= slope_low) throw ShapeError("snow slope range is empty");
  }
};

inline void to_json(nlohmann::json& j, const PerturbationSpec& s) {
  j = {{"kind", to_string(s.kind)},    {"severity", s.severity},     {"seed", s.seed},
       {"theta", s.theta},             {"elastic_sigma", s.elastic_sigma}, {"slope_low", s.slope_low},
       {"slope_high", s.slope_high},   {"line_length", s.line_length}, {"fill", s.fill},
       {"wavelength", s.wavelength},   {"attack_steps", s.attack_steps}, {"attack_step_size", s.attack_step_size}};
}

inline void from_json(const nlohmann::json& j, PerturbationSpec& s) {
  const PerturbationSpec d;
  s.kind = perturbation_kind_from_string(j.at("kind").get<std::string>());
  s.severity = j.value("severity", 0.0);
  s.seed = j.value("seed", std::uint64_t{0});
  s.theta = j.value("theta", d.theta);
  s.elastic_sigma = j.value("elastic_sigma", d.elastic_sigma);
  s.slope_low = j.value("slope_low", d.slope_low);
  s.slope_high = j.value("slope_high", d.slope_high);
  s.line_length = j.value("line_length", d.line_length);
  s.fill = j.value("fill", d.fill);
  s.wavelength = j.value("wavelength", d.wavelength);
  s.attack_steps = j.value("attack_steps", d.attack_steps);
  s.attack_step_size = j.value("attack_step_size", d.attack_step_size);
}

namespace detail {

inline void clip_unit(std::span<double> v) {
  for (auto& x : v) x = std::clamp(x, 0.0, 1.0);
}

inline void check_image(const Tensor& image) {
  if (image.ndim() != 3) throw ShapeError("perturbation: image must be [C, H, W], got " + shape_str(image.shape()));
  for (double v : image.data())
    if (!(v >= 0.0 && v <= 1.0)) throw DataError("perturbation: pixel outside [0, 1]");
}

template <typename F>
Tensor per_channel(const Tensor& image, F&& fn) {
  const int c = static_cast<int>(image.dim(0)), h = static_cast<int>(image.dim(1)), w = static_cast<int>(image.dim(2));
  const std::size_t px = static_cast<std::size_t>(h) * w;
  Tensor out(image.shape());
  for (int ch = 0; ch < c; ++ch) {
    Plane p(h, w, std::vector<double>(image.data().begin() + static_cast<long>(ch * px),
                                      image.data().begin() + static_cast<long>((ch + 1) * px)));
    const Plane q = fn(p);
    std::copy(q.v.begin(), q.v.end(), out.data().begin() + static_cast<long>(ch * px));
  }
  return out;
}

inline Tensor masked(const Tensor& image, const Mask& m, double fill) {
  return per_channel(image, [&](const Plane& p) { return apply_mask(p, m, fill); });
}

inline Tensor warped(const Tensor& image, const DisplacementField& field) {
  return per_channel(image, [&](const Plane& p) { return resample_bilinear(p, field); });
}

}  // namespace detail

/// Keeps every |x - x0| <= eps after rounding: clamps, then nudges any
/// value whose computed distance still exceeds eps towards x0.
inline void project_linf(std::span<double> x, std::span<const double> x0, double eps) {
  for (std::size_t i = 0; i < x.size(); ++i) {
    double v = std::clamp(x[i], x0[i] - eps, x0[i] + eps);
    while (std::abs(v - x0[i]) > eps) v = std::nextafter(v, x0[i]);
    x[i] = v;
  }
}

/// BIM on a batch [N, C, H, W]: x <- clip_{x0, eps}(clip_[0,1](x + step * sign(grad))).
/// Parameters enter the tape as constants; only the input is differentiated.
inline Tensor bim_attack(const Model& model, const Tensor& images, std::span<const int> labels, const AttackSpec& spec) {
  spec.validate();
  if (images.ndim() != 4 || labels.size() != images.dim(0)) throw ShapeError("bim: images/labels mismatch");
  Tensor x = images.clone();
  if (spec.epsilon == 0.0) return x;
  const double step = spec.resolved_step();
  for (int t = 0; t < spec.steps; ++t) {
    Tape tape;
    Tensor xi = x.clone().set_requires_grad();
    const Tensor loss = ops::softmax_cross_entropy(&tape, model.forward(&tape, xi, false), labels);
    tape.backward(loss);
    const auto g = xi.grad();
    auto xd = x.data();
    for (std::size_t i = 0; i < xd.size(); ++i) {
      if (!std::isfinite(g[i])) throw NumericalError("bim: non-finite input gradient");
      const double s = g[i] > 0.0 ? 1.0 : (g[i] < 0.0 ? -1.0 : 0.0);
      xd[i] = std::clamp(xd[i] + step * s, 0.0, 1.0);
    }
    project_linf(xd, images.data(), spec.epsilon);
  }
  return x;
}

/// Natural perturbation of one image; `rng` carries the image's random stream.
inline Tensor perturb_natural(const Tensor& image, const PerturbationSpec& spec, Rng& rng) {
  spec.validate();
  detail::check_image(image);
  const double s = spec.severity;
  if (s == 0.0) return image.clone();
  const int h = static_cast<int>(image.dim(1)), w = static_cast<int>(image.dim(2));
  Tensor out;
  switch (spec.kind) {
    case PerturbationKind::RotationScaling:
      out = detail::warped(image, displace_rotation_scaling(make_grid(h, w), s, spec.theta));
      break;
    case PerturbationKind::Elastic:
      out = detail::warped(image, displace_elastic(make_grid(h, w), s, spec.elastic_sigma, rng));
      break;
    case PerturbationKind::GaussianBlur:
      out = detail::per_channel(image, [&](const Plane& p) { return blur_plane(p, s); });
      break;
    case PerturbationKind::GaussianNoise:
      out = image.clone();
      for (auto& v : out.data()) v += s * rng.normal();
      break;
    case PerturbationKind::ObjectOcclusion: {
      // Disc with a one-pixel linear rim: coverage min(r, r - d + 1/2) clamped
      // to [0, 1], so accuracy varies continuously with the radius.
      const double r = s * std::min(h, w);
      const auto ci = rng.uniform_int(h), cj = rng.uniform_int(w);
      out = image.clone();
      for (std::size_t c = 0; c < image.dim(0); ++c)
        for (int i = 0; i < h; ++i)
          for (int j = 0; j < w; ++j) {
            const double d = std::hypot(static_cast<double>(i - ci), static_cast<double>(j - cj));
            const double cover = std::clamp(std::min(r, r - d + 0.5), 0.0, 1.0);
            double& v = out[(c * static_cast<std::size_t>(h) + i) * w + j];
            v += cover * (spec.fill - v);
          }
      break;
    }
    case PerturbationKind::Snow: {
      // floor(s) full streaks plus one streak shortened by the fractional part.
      const int full = static_cast<int>(std::floor(s));
      const double frac = s - full;
      const int len = spec.line_length > 0 ? spec.line_length : std::max(2, std::max(h, w) / 6);
      Mask m = snow_mask(h, w, full, spec.slope_low, spec.slope_high, len, rng);
      if (frac > 0.0) {
        const int part = std::max(1, static_cast<int>(std::lround(frac * len)));
        const Mask tail = snow_mask(h, w, 1, spec.slope_low, spec.slope_high, part, rng);
        for (std::size_t p = 0; p < m.size(); ++p) m[p] = static_cast<unsigned char>(m[p] | tail[p]);
      }
      out = detail::masked(image, m, 1.0);
      break;
    }
    case PerturbationKind::Wave: {
      Grid g = make_grid(h, w);
      DisplacementField f = identity_field(g);
      for (std::size_t p = 0; p < g.size(); ++p) f.x[p] += s * std::sin(2.0 * std::numbers::pi * g.y[p] / spec.wavelength);
      out = detail::warped(image, f);
      break;
    }
    case PerturbationKind::Saturation:
      out = image.clone();
      for (auto& v : out.data()) v = std::pow(v, 1.0 / (1.0 + s));
      break;
    case PerturbationKind::Adversarial:
      throw ShapeError("adversarial perturbation needs a model and labels");
  }
  detail::clip_unit(out.data());
  return out;
}

/// Random stream of image `index` under `seed`.
inline Rng image_stream(std::uint64_t seed, std::size_t index) { return Rng(derive_seed(seed, {0x70657274ULL, index})); }

/// Single-image entry point; `model` and `label` are only used by the attack.
inline Tensor apply_perturbation(const Tensor& image, const PerturbationSpec& spec, const Model* model = nullptr,
                                 int label = -1, std::size_t index = 0) {
  if (spec.kind != PerturbationKind::Adversarial) {
    Rng rng = image_stream(spec.seed, index);
    return perturb_natural(image, spec, rng);
  }
  spec.validate();
  detail::check_image(image);
  if (!model) throw ShapeError("adversarial perturbation requires a model");
  if (label < 0) throw DataError("adversarial perturbation requires a label");
  Shape batch{1, image.dim(0), image.dim(1), image.dim(2)};
  const Tensor x = image.reshape(batch).clone();
  const int labels[1] = {label};
  const Tensor adv = bim_attack(*model, x, labels, spec.attack());
  return adv.reshape(image.shape());
}

/// Perturbs every image of a dataset; image i uses stream (seed, i). The
/// attack runs in batches of `attack_batch` images.
inline Dataset perturb_dataset(const Dataset& d, const PerturbationSpec& spec, const Model* model = nullptr,
                               std::size_t attack_batch = 100) {
  Dataset out = d;
  out.images = d.images.clone();
  out.source = d.source + "+" + to_string(spec.kind) + "(" + std::to_string(spec.severity) + ")";
  const std::size_t px = d.image_numel();
  if (spec.kind == PerturbationKind::Adversarial) {
    spec.validate();
    if (!model) throw ShapeError("adversarial perturbation requires a model");
    if (!d.labeled()) throw DataError("adversarial perturbation requires labels");
    for (std::size_t s = 0; s < d.size(); s += attack_batch) {
      const Dataset part = d.slice(s, s + attack_batch);
      const Tensor adv = bim_attack(*model, part.images, part.labels, spec.attack());
      std::copy(adv.data().begin(), adv.data().end(), out.images.data().begin() + static_cast<long>(s * px));
    }
    return out;
  }
  for (std::size_t i = 0; i < d.size(); ++i) {
    const Tensor p = apply_perturbation(d.image(i), spec, nullptr, -1, i);
    std::copy(p.data().begin(), p.data().end(), out.images.data().begin() + static_cast<long>(i * px));
  }
  return out;
}

/// Mean squared pixel difference; pixel_max 255 reports on the 8-bit scale.
inline double mse_pair(const Tensor& clean, const Tensor& perturbed, double pixel_max = 1.0) {
  if (clean.ndim() == 0 || clean.dim(0) != perturbed.dim(0)) throw DataError("mse: image counts differ");
  if (clean.shape() != perturbed.shape()) throw ShapeError("mse: image shapes differ");
  double acc = 0.0;
  const auto a = clean.data(), b = perturbed.data();
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = pixel_max * (a[i] - b[i]);
    acc += d * d;
  }
  return acc / static_cast<double>(a.size());
}

}  // namespace taconv
