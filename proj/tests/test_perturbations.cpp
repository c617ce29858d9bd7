#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "support.hpp"
#include "taconv/calibration.hpp"
#include "taconv/perturbations.hpp"

using namespace taconv;
using namespace taconv::testing;

namespace {

Model tiny_model(std::uint64_t seed) {
  NetworkConfig c;
  c.name = "tiny";
  c.height = c.width = 8;
  c.num_classes = 3;
  c.layers = {{LayerKind::Conv, 4, 3, 1, true}, {LayerKind::Conv, 6, 3, 2, true}};
  return Model::assemble(c, seed);
}

const std::vector<PerturbationKind> kImageKinds{
    PerturbationKind::RotationScaling, PerturbationKind::Elastic, PerturbationKind::GaussianBlur,
    PerturbationKind::GaussianNoise,   PerturbationKind::ObjectOcclusion, PerturbationKind::Snow,
    PerturbationKind::Wave,            PerturbationKind::Saturation};

}  // namespace

TEST(Perturb, ZeroSeverityIsIdentity) {
  Rng rng(1);
  const Tensor img = random_tensor({1, 12, 12}, rng, 0.0, 1.0);
  for (auto kind : kImageKinds) {
    PerturbationSpec s{.kind = kind, .severity = 0.0, .seed = 4};
    const Tensor out = apply_perturbation(img, s, nullptr, -1, 3);
    EXPECT_EQ(max_abs_diff(out.data(), img.data()), 0.0) << to_string(kind);
  }
  const Model m = tiny_model(1);
  const Tensor small = random_tensor({1, 8, 8}, rng, 0.0, 1.0);
  PerturbationSpec adv{.kind = PerturbationKind::Adversarial, .severity = 0.0};
  EXPECT_EQ(max_abs_diff(apply_perturbation(small, adv, &m, 1).data(), small.data()), 0.0);
}

TEST(Perturb, OutputsStayInUnitRange) {
  Rng rng(2);
  const Tensor img = random_tensor({2, 16, 16}, rng, 0.0, 1.0);
  for (auto kind : kImageKinds) {
    PerturbationSpec s{.kind = kind, .severity = default_s_max(kind), .seed = 9};
    const Tensor out = apply_perturbation(img, s, nullptr, -1, 0);
    for (double v : out.data()) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
  }
}

TEST(Perturb, NoiseMatchesFoldedNormalMean) {
  const Tensor gray(Shape{1, 64, 64}, 0.5);
  for (double s : {0.02, 0.06}) {
    PerturbationSpec spec{.kind = PerturbationKind::GaussianNoise, .severity = s, .seed = 17};
    double acc = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < 8; ++i) {
      const Tensor out = apply_perturbation(gray, spec, nullptr, -1, i);
      for (double v : out.data()) acc += std::abs(v - 0.5), ++n;
    }
    const double expect = s * std::sqrt(2.0 / std::numbers::pi);
    EXPECT_NEAR(acc / static_cast<double>(n), expect, 0.05 * expect) << s;
  }
}

TEST(Perturb, OcclusionCoversDiscArea) {
  const Tensor white(Shape{1, 20, 20}, 1.0);
  for (double s : {0.1, 0.2, 0.2031, 0.35}) {
    PerturbationSpec spec{.kind = PerturbationKind::ObjectOcclusion, .severity = s, .seed = 23};
    const double r = s * 20.0;
    for (std::size_t i = 0; i < 10; ++i) {
      const Tensor out = apply_perturbation(white, spec, nullptr, -1, i);
      Rng replay = image_stream(spec.seed, i);
      const auto ci = replay.uniform_int(20), cj = replay.uniform_int(20);
      double area = 0.0;
      for (int y = 0; y < 20; ++y)
        for (int x = 0; x < 20; ++x) {
          const double d = std::hypot(y - static_cast<double>(ci), x - static_cast<double>(cj));
          const double v = out[static_cast<std::size_t>(y * 20 + x)];
          area += (1.0 - v) / (1.0 - spec.fill);
          if (d <= r - 0.5) EXPECT_DOUBLE_EQ(v, spec.fill);
          if (d >= r + 0.5) EXPECT_EQ(v, 1.0);
        }
      const bool interior = ci >= r + 1 && cj >= r + 1 && ci + r + 1 <= 19 && cj + r + 1 <= 19;
      if (interior) EXPECT_NEAR(area, std::numbers::pi * r * r, 2.0 * std::numbers::pi * r + 1.0);
    }
  }
}

TEST(Perturb, OcclusionGrowsContinuously) {
  const Tensor white(Shape{1, 20, 20}, 1.0);
  auto covered = [&](double s) {
    PerturbationSpec spec{.kind = PerturbationKind::ObjectOcclusion, .severity = s, .seed = 4};
    const Tensor out = apply_perturbation(white, spec, nullptr, -1, 0);
    double a = 0.0;
    for (double v : out.data()) a += 2.0 * (1.0 - v);
    return a;
  };
  double prev = 0.0;
  for (int k = 1; k <= 60; ++k) {
    const double a = covered(k / 240.0);
    EXPECT_GE(a, prev);
    EXPECT_LE(a - prev, 4.0) << k;  // r grows by 1/12 px per step
    prev = a;
  }
}

TEST(Perturb, SnowSeverityInterpolatesStreaks) {
  const Tensor black(Shape{1, 24, 24}, 0.0);
  auto lit = [&](double s) {
    PerturbationSpec spec{.kind = PerturbationKind::Snow, .severity = s, .seed = 5, .line_length = 6};
    const Tensor out = apply_perturbation(black, spec, nullptr, -1, 0);
    int n = 0;
    for (double v : out.data()) n += v == 1.0;
    return n;
  };
  EXPECT_EQ(lit(0.0), 0);
  EXPECT_GT(lit(1.0), 0);
  EXPECT_LE(lit(1.0), 6);
  EXPECT_LE(lit(2.5), 18);
  EXPECT_LE(lit(1.0), lit(1.5));  // the extra partial streak only adds pixels
}

TEST(Perturb, DatasetUsesPerImageStreams) {
  const Dataset d = synth_dataset(2, 4, 3);
  PerturbationSpec spec{.kind = PerturbationKind::Elastic, .severity = 2.0, .seed = 8};
  const Dataset all = perturb_dataset(d, spec);
  const Dataset tail = perturb_dataset(d.slice(4, 8), spec);
  for (std::size_t i = 0; i < d.size(); ++i) {
    const Tensor one = apply_perturbation(d.image(i), spec, nullptr, -1, i);
    EXPECT_EQ(max_abs_diff(one.data(), all.image(i).data()), 0.0);
  }
  // Streams follow the index within the set, so a slice restarts them.
  EXPECT_EQ(max_abs_diff(tail.image(0).data(), apply_perturbation(d.image(4), spec, nullptr, -1, 0).data()), 0.0);
}

TEST(Perturb, Errors) {
  const Tensor img(Shape{1, 4, 4}, 0.5);
  PerturbationSpec neg{.kind = PerturbationKind::GaussianBlur, .severity = -1.0};
  EXPECT_THROW(apply_perturbation(img, neg), ShapeError);
  Tensor bad = img.clone();
  bad[3] = 1.5;
  EXPECT_THROW(apply_perturbation(bad, PerturbationSpec{.kind = PerturbationKind::GaussianBlur, .severity = 1.0}),
               DataError);
  PerturbationSpec adv{.kind = PerturbationKind::Adversarial, .severity = 0.1};
  EXPECT_THROW(apply_perturbation(img, adv), ShapeError);
  EXPECT_THROW(perturbation_kind_from_string("fog"), DataError);
  EXPECT_EQ(perturbation_kind_from_string("snow"), PerturbationKind::Snow);
}

TEST(Attack, SingleStepEqualsFgsm) {
  Rng rng(3);
  const Model m = tiny_model(2);
  const Tensor x0 = random_tensor({5, 1, 8, 8}, rng, 0.0, 1.0);
  const std::vector<int> labels{0, 1, 2, 1, 0};
  const double eps = 0.07;
  // Independent one-shot step from the full-parameter tape.
  Tensor xi = x0.clone().set_requires_grad();
  Tape tape;
  tape.backward(ops::softmax_cross_entropy(&tape, m.forward(&tape, xi), labels));
  Tensor fgsm = x0.clone();
  for (std::size_t i = 0; i < fgsm.numel(); ++i) {
    const double g = xi.grad()[i];
    fgsm[i] = std::clamp(x0[i] + eps * ((g > 0) - (g < 0)), 0.0, 1.0);
  }
  const Tensor adv = bim_attack(m, x0, labels, {eps, 1, eps});
  EXPECT_LT(max_abs_diff(adv.data(), fgsm.data()), 1e-12);
}

TEST(Attack, RespectsBudgetExactly) {
  Rng rng(4);
  const Model m = tiny_model(3);
  const Tensor x0 = random_tensor({6, 1, 8, 8}, rng, 0.0, 1.0);
  const std::vector<int> labels{0, 1, 2, 0, 1, 2};
  for (double eps : {0.0, 0.01, 1.0 / 255.0, 0.1, 0.3}) {
    const Tensor adv = bim_attack(m, x0, labels, {eps, 7, 0.0});
    for (std::size_t i = 0; i < adv.numel(); ++i) {
      EXPECT_LE(std::abs(adv[i] - x0[i]), eps);
      EXPECT_GE(adv[i], 0.0);
      EXPECT_LE(adv[i], 1.0);
    }
    if (eps == 0.0) EXPECT_EQ(max_abs_diff(adv.data(), x0.data()), 0.0);
  }
}

TEST(Attack, RaisesLoss) {
  Rng rng(5);
  const Model m = tiny_model(4);
  const Tensor x0 = random_tensor({10, 1, 8, 8}, rng, 0.0, 1.0);
  const std::vector<int> labels{0, 1, 2, 0, 1, 2, 0, 1, 2, 0};
  auto loss = [&](const Tensor& x) { return ops::softmax_cross_entropy(nullptr, m.forward(nullptr, x), labels).item(); };
  EXPECT_GT(loss(bim_attack(m, x0, labels, {0.05, 5, 0.0})), loss(x0));
}

TEST(Attack, SpecValidation) {
  EXPECT_THROW((AttackSpec{-0.1, 10, 0.0}).validate(), ShapeError);
  EXPECT_THROW((AttackSpec{0.1, 0, 0.0}).validate(), ShapeError);
  EXPECT_THROW((AttackSpec{0.1, 2, 0.01}).validate(), ShapeError);
  EXPECT_DOUBLE_EQ((AttackSpec{0.1, 10, 0.0}).resolved_step(), 0.025);
}

TEST(Attack, ProjectionHandlesRounding) {
  std::vector<double> x{0.3 + 0.2, 0.0, 1.0}, x0{0.3, 0.05, 0.9};
  project_linf(x, x0, 0.2);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_LE(std::abs(x[i] - x0[i]), 0.2);
}

TEST(Mse, Cases) {
  Rng rng(6);
  const Tensor a = random_tensor({3, 1, 5, 5}, rng, 0.0, 1.0), b = random_tensor({3, 1, 5, 5}, rng, 0.0, 1.0);
  EXPECT_EQ(mse_pair(a, a), 0.0);
  Tensor shifted = a.clone();
  for (auto& v : shifted.data()) v += 0.25;
  EXPECT_NEAR(mse_pair(a, shifted), 0.0625, 1e-15);
  double acc = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) acc += (255.0 * (a[i] - b[i])) * (255.0 * (a[i] - b[i]));
  EXPECT_NEAR(mse_pair(a, b, 255.0), acc / static_cast<double>(a.numel()), 1e-12 * acc);
  EXPECT_THROW(mse_pair(a, random_tensor({2, 1, 5, 5}, rng)), DataError);
  EXPECT_THROW(mse_pair(a, random_tensor({3, 1, 4, 5}, rng)), ShapeError);
}
