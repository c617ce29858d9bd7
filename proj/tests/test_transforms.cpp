#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <numeric>
#include <vector>

#include "support.hpp"
#include "taconv/basis.hpp"
#include "taconv/transforms.hpp"

using namespace taconv;

namespace {

Plane random_plane(int rows, int cols, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Plane p(rows, cols);
  for (auto& v : p.v) v = rng.uniform(lo, hi);
  return p;
}

double max_diff(const Plane& a, const Plane& b) {
  return taconv::testing::max_abs_diff(a.v, b.v);
}

const std::vector<TransformKind> kAllKinds{TransformKind::RotationScaling, TransformKind::Elastic,
                                           TransformKind::GaussianBlur,    TransformKind::GaussianNoise,
                                           TransformKind::ObjectOcclusion, TransformKind::SnowOcclusion};

// Discretized 2-D Gaussian rescaled to unit sum on the grid.
Plane unit_mass_gaussian(const Grid& g, double sigma) {
  Plane p(g.rows, g.cols);
  double total = 0.0;
  for (std::size_t i = 0; i < g.size(); ++i) {
    p.v[i] = std::exp(-(g.x[i] * g.x[i] + g.y[i] * g.y[i]) / (2.0 * sigma * sigma));
    total += p.v[i];
  }
  for (auto& v : p.v) v /= total;
  return p;
}

}  // namespace

TEST(Fields, RotationScalingClosedForms) {
  const Grid g = make_grid(5);
  const auto id = displace_rotation_scaling(g, 0.0, 1.1);
  EXPECT_EQ(id.x, g.x);
  EXPECT_EQ(id.y, g.y);

  const double a = 0.3;
  const auto scale = displace_rotation_scaling(g, a, 0.0);
  const auto rot = displace_rotation_scaling(g, a, std::numbers::pi / 2);
  for (std::size_t p = 0; p < g.size(); ++p) {
    EXPECT_NEAR(scale.x[p], (1 + a) * g.x[p], 1e-15);
    EXPECT_NEAR(scale.y[p], (1 + a) * g.y[p], 1e-15);
    EXPECT_NEAR(rot.x[p], g.x[p] + a * g.y[p], 1e-15);
    EXPECT_NEAR(rot.y[p], g.y[p] - a * g.x[p], 1e-15);
  }
  EXPECT_EQ(rot.x[12], 0.0);
  EXPECT_EQ(rot.y[12], 0.0);
}

TEST(Fields, ElasticIdentityAndDeterminism) {
  const Grid g = make_grid(5);
  Rng r0(9);
  const auto id = displace_elastic(g, 0.0, 1.0, r0);
  EXPECT_EQ(id.x, g.x);
  EXPECT_EQ(id.y, g.y);

  Rng r1(77), r2(77);
  const auto f1 = displace_elastic(g, 0.4, 1.0, r1), f2 = displace_elastic(g, 0.4, 1.0, r2);
  EXPECT_EQ(f1.x, f2.x);
  EXPECT_EQ(f1.y, f2.y);
  EXPECT_NEAR(f1.x[12], 0.0, 1e-12);
  EXPECT_NEAR(f1.y[12], 0.0, 1e-12);
}

TEST(Fields, ElasticDisplacementBound) {
  // Replays the anchor draws, fits the affine offset by elimination, and
  // bounds each component by |linear part| + alpha * peak density.
  const Grid g = make_grid(5);
  for (std::uint64_t seed : {1, 2, 3, 4, 5}) {
    const double alpha = 0.05 * static_cast<double>(seed), sigma = 1.0;
    Rng replay(seed);
    double shift[3][2];
    for (auto& s : shift) {
      s[0] = -alpha + 2.0 * alpha * replay.uniform();
      s[1] = -alpha + 2.0 * alpha * replay.uniform();
    }
    const double anchors[3][2] = {{-2, -2}, {2, -2}, {-2, 2}};
    double lin[2][2];
    for (int c = 0; c < 2; ++c) {
      // [x y 1] rows; solve for (a, b, t) with elimination on the 3x3 system.
      double m[3][4];
      for (int i = 0; i < 3; ++i) {
        m[i][0] = anchors[i][0];
        m[i][1] = anchors[i][1];
        m[i][2] = 1.0;
        m[i][3] = shift[i][c];
      }
      for (int col = 0; col < 3; ++col) {
        int piv = col;
        for (int r = col; r < 3; ++r)
          if (std::abs(m[r][col]) > std::abs(m[piv][col])) piv = r;
        for (int j = 0; j < 4; ++j) std::swap(m[col][j], m[piv][j]);
        for (int r = 0; r < 3; ++r) {
          if (r == col) continue;
          const double f = m[r][col] / m[col][col];
          for (int j = 0; j < 4; ++j) m[r][j] -= f * m[col][j];
        }
      }
      lin[c][0] = m[0][3] / m[0][0];
      lin[c][1] = m[1][3] / m[1][1];
    }
    const double peak = alpha / std::sqrt(2.0 * std::numbers::pi * sigma * sigma);
    Rng rng(seed);
    const auto f = displace_elastic(g, alpha, sigma, rng);
    for (std::size_t p = 0; p < g.size(); ++p) {
      const double bx = std::abs(lin[0][0] * g.x[p] + lin[0][1] * g.y[p]) + peak;
      const double by = std::abs(lin[1][0] * g.x[p] + lin[1][1] * g.y[p]) + peak;
      EXPECT_LE(std::abs(f.x[p] - g.x[p]), bx + 1e-12);
      EXPECT_LE(std::abs(f.y[p] - g.y[p]), by + 1e-12);
    }
  }
}

TEST(Resample, IdentityConstantAndLinearity) {
  Rng rng(5);
  const Grid g = make_grid(7);
  const Plane f = random_plane(7, 7, rng), h = random_plane(7, 7, rng);
  EXPECT_EQ(resample_bilinear(f, identity_field(g)).v, f.v);

  // theta = pi contracts toward the centre, so every target stays inside.
  const auto contract = displace_rotation_scaling(g, 0.37, std::numbers::pi);
  const Plane c(7, 7, 2.5);
  for (double v : resample_bilinear(c, contract).v) EXPECT_NEAR(v, 2.5, 1e-12);

  Rng er(11);
  const auto warp = displace_elastic(g, 0.8, 1.0, er);
  Plane mix(7, 7);
  for (std::size_t p = 0; p < mix.size(); ++p) mix.v[p] = 1.5 * f.v[p] - 0.25 * h.v[p];
  const Plane rf = resample_bilinear(f, warp), rh = resample_bilinear(h, warp), rm = resample_bilinear(mix, warp);
  for (std::size_t p = 0; p < mix.size(); ++p) EXPECT_NEAR(rm.v[p], 1.5 * rf.v[p] - 0.25 * rh.v[p], 1e-12);
}

TEST(Resample, OutsideReadsZero) {
  const Grid g = make_grid(5);
  DisplacementField far = identity_field(g);
  for (auto& x : far.x) x += 10.0;
  for (double v : resample_bilinear(Plane(5, 5, 1.0), far).v) EXPECT_EQ(v, 0.0);
  far.x[0] = std::nan("");
  EXPECT_THROW(resample_bilinear(Plane(5, 5, 1.0), far), NumericalError);
}

TEST(Blur, TinySigmaIsIdentity) {
  Rng rng(1);
  const Plane f = random_plane(5, 5, rng);
  EXPECT_EQ(blur_plane(f, 0.0).v, f.v);
  EXPECT_EQ(blur_plane(f, 5e-7).v, f.v);
  EXPECT_THROW(blur_plane(f, -1.0), ShapeError);
}

TEST(Blur, SemigroupOnLargeGrid) {
  const Grid g = make_grid(15);
  const Plane out = blur_plane(unit_mass_gaussian(g, 1.0), 1.0);
  const Plane target = unit_mass_gaussian(g, std::sqrt(2.0));
  double num = 0.0, den = 0.0;
  for (std::size_t p = 0; p < out.size(); ++p) {
    num += (out.v[p] - target.v[p]) * (out.v[p] - target.v[p]);
    den += target.v[p] * target.v[p];
  }
  EXPECT_LT(std::sqrt(num / den), 0.02);
}

TEST(Blur, LosesMassOnlyAtBorder) {
  Rng rng(2);
  const Plane f = random_plane(5, 5, rng, 0.0, 1.0);
  const double in = std::accumulate(f.v.begin(), f.v.end(), 0.0);
  const Plane out = blur_plane(f, 0.8);
  EXPECT_LE(std::accumulate(out.v.begin(), out.v.end(), 0.0), in + 1e-12);
  for (double v : out.v) EXPECT_GE(v, 0.0);
  // An interior impulse on a wide grid keeps its mass.
  Plane delta(15, 15);
  delta(7, 7) = 1.0;
  const Plane d = blur_plane(delta, 1.0);
  EXPECT_NEAR(std::accumulate(d.v.begin(), d.v.end(), 0.0), 1.0, 1e-12);
}

TEST(Noise, AddsCentredBump) {
  const Grid g = make_grid(5);
  Rng rng(4);
  const Plane f = random_plane(5, 5, rng), h = random_plane(5, 5, rng);
  EXPECT_EQ(noise_plane(f, g, 0.0, 1.0).v, f.v);
  const Plane z = noise_plane(Plane(5, 5), g, 0.7, 1.2);
  for (std::size_t p = 0; p < z.size(); ++p) {
    const double expect = 0.7 * std::exp(-(g.x[p] * g.x[p] + g.y[p] * g.y[p]) / (2 * 1.44)) / (2 * std::numbers::pi * 1.44);
    EXPECT_NEAR(z.v[p], expect, 1e-15);
    if (p != 12) EXPECT_LT(z.v[p], z.v[12]);
  }
  const Plane nf = noise_plane(f, g, 0.7, 1.2), nh = noise_plane(h, g, 0.7, 1.2);
  for (std::size_t p = 0; p < f.size(); ++p) EXPECT_NEAR(nf.v[p] - f.v[p], nh.v[p] - h.v[p], 1e-15);
}

TEST(Occlusion, MatchesDistanceScan) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const double radius = 0.3 * static_cast<double>(seed % 7);
    Rng rng(seed), replay(seed);
    const Mask m = occlusion_mask(9, 9, radius, rng);
    const auto ci = replay.uniform_int(9), cj = replay.uniform_int(9);
    int expected = 0, got = 0;
    for (int i = 0; i < 9; ++i)
      for (int j = 0; j < 9; ++j) {
        const bool inside = std::hypot(i - static_cast<double>(ci), j - static_cast<double>(cj)) < radius;
        expected += inside;
        got += m[static_cast<std::size_t>(i * 9 + j)];
        EXPECT_EQ(static_cast<bool>(m[static_cast<std::size_t>(i * 9 + j)]), inside);
      }
    EXPECT_EQ(got, expected);
  }
}

TEST(Occlusion, RadiusExtremes) {
  Rng rng(3);
  const Mask zero = occlusion_mask(5, 5, 0.0, rng);
  EXPECT_EQ(std::accumulate(zero.begin(), zero.end(), 0), 0);
  const Mask all = occlusion_mask(5, 5, 5 * std::sqrt(2.0), rng);
  EXPECT_EQ(std::accumulate(all.begin(), all.end(), 0), 25);
  const Plane out = occlude_basis(Plane(5, 5, 1.0), 8.0, rng);
  for (double v : out.v) EXPECT_EQ(v, 0.0);
}

TEST(Snow, MatchesMembershipScan) {
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    const int n_lines = 1 + static_cast<int>(seed % 3), length = (seed % 2) ? 4 : 0;
    Rng rng(seed), replay(seed);
    const Mask m = snow_mask(11, 11, n_lines, -2.0, 3.0, length, rng);
    std::vector<int> oracle(121, 0);
    for (int n = 0; n < n_lines; ++n) {
      const int r0 = static_cast<int>(replay.uniform_int(11)), c0 = static_cast<int>(replay.uniform_int(11));
      const double s = -2.0 + static_cast<double>(replay.uniform_int(5));
      const int len = length > 0 ? length : 11;
      auto round_away = [](double v) { return v < 0 ? -std::floor(-v + 0.5) : std::floor(v + 0.5); };
      for (int i = 0; i < 11; ++i)
        for (int j = 0; j < 11; ++j) {
          bool on;
          if (std::abs(s) <= 1.0) {
            const int t = j - c0;
            on = t >= 0 && t < len && i == r0 + static_cast<int>(round_away(s * t));
          } else {
            const int t = i - r0;
            on = t >= 0 && t < len && j == c0 + static_cast<int>(round_away(t / s));
          }
          if (on) oracle[static_cast<std::size_t>(i * 11 + j)] = 1;
        }
    }
    for (std::size_t p = 0; p < 121; ++p) EXPECT_EQ(m[p], oracle[p]) << "seed " << seed << " pixel " << p;
  }
}

TEST(Snow, ZeroLinesAndDeterminism) {
  Rng rng(1);
  const Plane f = random_plane(5, 5, rng);
  Rng r0(8);
  EXPECT_EQ(snow_basis(f, 0, -2, 3, r0).v, f.v);
  Rng a(8), b(8);
  EXPECT_EQ(snow_mask(7, 7, 3, -2, 3, 0, a), snow_mask(7, 7, 3, -2, 3, 0, b));
}

TEST(TransformSpec, Validation) {
  TransformSpec s;
  s.kind = TransformKind::Identity;
  s.alpha = -5;  // ignored
  EXPECT_NO_THROW(s.validate());
  s.kind = TransformKind::RotationScaling;
  EXPECT_THROW(s.validate(), ShapeError);
  s.alpha = 0.1;
  s.slope_low = 3;
  EXPECT_THROW(s.validate(), ShapeError);
}

TEST(TransformSpec, ZeroIntensityIsIdentity) {
  Rng rng(6);
  const Plane f = random_plane(5, 5, rng);
  for (auto kind : kAllKinds) {
    TransformSpec s;
    s.kind = kind;
    s.sigma = kind == TransformKind::GaussianBlur ? 0.0 : 1.0;
    s.seed = 3;
    EXPECT_EQ(FilterTransform(s, 5, 5).apply(f).v, f.v) << to_string(kind);
  }
}

TEST(Bank, BranchZeroAndZeroIntensity) {
  const BasisSpec spec = BasisSpec::make(5, 1.5, 10);
  const Tensor base = eval_basis(spec);
  const BasisBank single = build_transform_bank(base, TransformKind::Identity, {}, spec);
  ASSERT_EQ(single.size(), 1u);
  EXPECT_EQ(single.branch(0).data().size(), base.data().size());
  EXPECT_TRUE(std::equal(base.data().begin(), base.data().end(), single.branch(0).data().begin()));

  std::vector<TransformSpec> flat(3);
  for (auto& s : flat) s.kind = TransformKind::RotationScaling;
  const BasisBank bank = build_transform_bank(base, TransformKind::RotationScaling, flat, spec);
  ASSERT_EQ(bank.size(), 4u);
  for (std::size_t b = 0; b < 4; ++b)
    EXPECT_TRUE(std::equal(base.data().begin(), base.data().end(), bank.branch(b).data().begin()));

  flat[1].kind = TransformKind::Elastic;
  EXPECT_THROW(build_transform_bank(base, TransformKind::RotationScaling, flat, spec), ShapeError);
}

TEST(Bank, RebuildIsBitExact) {
  for (auto kind : kAllKinds) {
    const BankSpec spec = make_bank_spec(BasisSpec::make(5, 1.5), kind, 4, 21);
    const BasisBank a = spec.build(), b = spec.build();
    ASSERT_EQ(a.size(), 5u);
    for (std::size_t br = 0; br < a.size(); ++br)
      EXPECT_TRUE(std::equal(a.branch(br).data().begin(), a.branch(br).data().end(), b.branch(br).data().begin()));
    const BankSpec back = nlohmann::json(spec).get<BankSpec>();
    const BasisBank c = back.build();
    for (std::size_t br = 0; br < a.size(); ++br)
      EXPECT_TRUE(std::equal(a.branch(br).data().begin(), a.branch(br).data().end(), c.branch(br).data().begin()));
  }
}

TEST(Bank, TransformCommutesWithSynthesis) {
  const BasisSpec bs = BasisSpec::make(5, 1.5);
  Rng rng(13);
  for (auto kind : kAllKinds) {
    const BasisBank bank = make_bank_spec(bs, kind, 4, 99).build();
    std::vector<double> w(bank.n_basis());
    for (auto& v : w) v = rng.uniform(-1, 1);
    const double wsum = std::accumulate(w.begin(), w.end(), 0.0);
    const Tensor kernel = synthesize_kernel(w, bank.branch(0));
    const Plane kp(5, 5, std::vector<double>(kernel.data().begin(), kernel.data().end()));
    for (std::size_t b = 1; b < bank.size(); ++b) {
      const FilterTransform t(bank.branch_specs()[b], 5, 5);
      const Plane direct = t.apply(kp);
      const Tensor via_bank = synthesize_kernel(w, bank.branch(b));
      if (kind == TransformKind::GaussianNoise) {
        // Each basis function carries its own bump, so the two orders differ
        // by (1 - sum w) copies of it.
        for (std::size_t p = 0; p < 25; ++p)
          EXPECT_NEAR(direct.v[p] - via_bank[p], (1.0 - wsum) * t.additive().v[p], 1e-10);
      } else {
        double d = 0.0;
        for (std::size_t p = 0; p < 25; ++p) d = std::max(d, std::abs(direct.v[p] - via_bank[p]));
        EXPECT_LT(d, 1e-10) << to_string(kind) << " branch " << b;
      }
    }
  }
}

TEST(Bank, BranchesDiffer) {
  for (auto kind : kAllKinds) {
    const BasisBank bank = make_bank_spec(BasisSpec::make(5, 1.5), kind, 4, 5).build();
    for (std::size_t b = 1; b < bank.size(); ++b) {
      double d = 0.0;
      for (std::size_t i = 0; i < bank.branch(0).numel(); ++i)
        d = std::max(d, std::abs(bank.branch(b)[i] - bank.branch(0)[i]));
      EXPECT_GT(d, 1e-6) << to_string(kind) << " branch " << b;
    }
  }
}
