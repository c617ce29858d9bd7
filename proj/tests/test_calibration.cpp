#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "taconv/calibration.hpp"

using namespace taconv;

namespace {

CalibrationOptions range(double s_max) {
  CalibrationOptions o;
  o.s_max = s_max;
  return o;
}

SeverityProfile sample_profile() {
  SeverityProfile p;
  p.target_drop = 10.0;
  p.tol = 1.0;
  p.clean_accuracy = 97.25;
  p.model_id = "0123456789abcdef";
  p.dataset_id = "fedcba9876543210";
  const std::vector<std::pair<PerturbationKind, std::array<double, 3>>> rows{
      {PerturbationKind::Snow, {3.6666666666666665, 10.9, 1247.88}},
      {PerturbationKind::GaussianBlur, {1.1875, 10.3, 692.6}},
      {PerturbationKind::Adversarial, {0.0390625, 9.15, 84.07}}};
  for (const auto& [kind, v] : rows) {
    ProfileEntry e;
    e.spec.kind = kind;
    e.spec.seed = 77;
    e.spec.severity = v[0];
    e.achieved_drop = v[1];
    e.mse = v[2];
    e.probes = 3;
    p.entries.push_back(e);
  }
  return p;
}

}  // namespace

TEST(Calibrate, LinearAccuracyHitsHalf) {
  const auto r = calibrate_severity([](double s) { return 90.0 - 20.0 * s; }, 90.0, 10.0, 1e-9, range(1.0), "linear");
  EXPECT_EQ(r.severity, 0.5);
  EXPECT_NEAR(r.achieved_drop, 10.0, 1e-9);
}

TEST(Calibrate, ZeroTargetNeedsNoProbes) {
  int calls = 0;
  const auto r = calibrate_severity([&](double) { return ++calls, 50.0; }, 90.0, 0.0, 1.0, range(1.0), "none");
  EXPECT_EQ(r.severity, 0.0);
  EXPECT_EQ(calls, 0);
}

TEST(Calibrate, BisectionStaysWithinProbeBound) {
  // drop = 45 s^2 reaches 10 at s = 0.471; the grid brackets it in [1/3, 1/2].
  for (double tol : {1.0, 0.1, 0.01}) {
    const auto r = calibrate_severity([](double s) { return 95.0 - 45.0 * s * s; }, 95.0, 10.0, tol, range(1.0), "quad");
    EXPECT_LE(std::abs(r.achieved_drop - 10.0), tol);
    EXPECT_LE(r.probes, max_bisection_probes(1.0 / 6.0, 1.0 / 256.0));
    EXPECT_EQ(r.evaluations, 6 + r.probes);
    EXPECT_NEAR(r.severity, std::sqrt(r.achieved_drop / 45.0), 1e-12);
  }
  EXPECT_EQ(max_bisection_probes(1.0, 1.0 / 256.0), 8);
}

TEST(Calibrate, TraceIsDeterministic) {
  auto acc = [](double s) { return 80.0 - 30.0 * std::sqrt(s); };
  const auto a = calibrate_severity(acc, 80.0, 10.0, 0.2, range(2.0), "sqrt");
  const auto b = calibrate_severity(acc, 80.0, 10.0, 0.2, range(2.0), "sqrt");
  EXPECT_EQ(a.trace, b.trace);
  EXPECT_EQ(a.severity, b.severity);
}

TEST(Calibrate, NonMonotoneGridFails) {
  auto wavy = [](double s) { return 90.0 - 30.0 * std::sin(2.5 * std::numbers::pi * s); };
  try {
    calibrate_severity(wavy, 90.0, 10.0, 1.0, range(1.0), "wavy_kind");
    FAIL() << "expected a calibration error";
  } catch (const CalibrationError& e) {
    EXPECT_NE(std::string(e.what()).find("wavy_kind"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("monotone"), std::string::npos);
  }
}

TEST(Calibrate, UnreachableTargetReportsMaxDrop) {
  try {
    calibrate_severity([](double s) { return 90.0 - 2.0 * s; }, 90.0, 10.0, 1.0, range(1.0), "weak");
    FAIL() << "expected a calibration error";
  } catch (const CalibrationError& e) {
    EXPECT_NE(std::string(e.what()).find("unreachable"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("2.0"), std::string::npos);
  }
}

TEST(Calibrate, StepFunctionCannotBeMatched) {
  // A jump from 0 to 25 points at s = 0.3 skips the target band entirely.
  auto step = [](double s) { return s < 0.3 ? 90.0 : 65.0; };
  EXPECT_THROW(calibrate_severity(step, 90.0, 10.0, 1.0, range(1.0), "step"), CalibrationError);
}

TEST(Calibrate, InvalidArguments) {
  auto acc = [](double s) { return 90.0 - 20.0 * s; };
  EXPECT_THROW(calibrate_severity(acc, 90.0, -1.0, 1.0, range(1.0), "x"), CalibrationError);
  EXPECT_THROW(calibrate_severity(acc, 90.0, 10.0, 0.0, range(1.0), "x"), CalibrationError);
  EXPECT_THROW(calibrate_severity(acc, 9.0, 10.0, 1.0, range(1.0), "x"), CalibrationError);
  EXPECT_THROW(calibrate_severity(acc, 90.0, 10.0, 1.0, range(0.0), "x"), CalibrationError);
}

TEST(Profile, DropSpread) {
  SeverityProfile p = sample_profile();
  const double mean = (10.9 + 10.3 + 9.15) / 3.0;
  const double var =
      ((10.9 - mean) * (10.9 - mean) + (10.3 - mean) * (10.3 - mean) + (9.15 - mean) * (9.15 - mean)) / 3.0;
  EXPECT_NEAR(p.drop_std(), std::sqrt(var), 1e-12);
  p.entries.resize(1);
  EXPECT_EQ(p.drop_std(), 0.0);
  EXPECT_NE(p.find(PerturbationKind::Snow), nullptr);
  EXPECT_EQ(p.find(PerturbationKind::Elastic), nullptr);
}

TEST(Profile, JsonKeepsKindOrder) {
  const SeverityProfile p = sample_profile();
  const SeverityProfile back = nlohmann::json::parse(nlohmann::json(p).dump()).get<SeverityProfile>();
  ASSERT_EQ(back.entries.size(), 3u);
  EXPECT_EQ(back.entries[0].spec.kind, PerturbationKind::GaussianBlur);
  EXPECT_EQ(back.entries[1].spec.kind, PerturbationKind::Snow);
  EXPECT_EQ(back.entries[2].spec.kind, PerturbationKind::Adversarial);
  EXPECT_EQ(back.entries[1].spec.severity, p.entries[0].spec.severity);
  EXPECT_EQ(back.model_id, p.model_id);
  EXPECT_EQ(back.clean_accuracy, p.clean_accuracy);
}

TEST(Report, CsvParsesBack) {
  SeverityProfile p = sample_profile();
  const auto rows = parse_standardization_csv(standardization_csv(p));
  ASSERT_EQ(rows.size(), p.entries.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    EXPECT_EQ(rows[i].kind, to_string(p.entries[i].spec.kind));
    EXPECT_NEAR(rows[i].severity, p.entries[i].spec.severity, 1e-9);
    EXPECT_NEAR(rows[i].drop, p.entries[i].achieved_drop, 1e-9);
    EXPECT_NEAR(rows[i].mse, p.entries[i].mse, 1e-9);
  }
  p.entries.clear();
  EXPECT_EQ(standardization_csv(p), "kind,severity,drop,mse\n");
  EXPECT_TRUE(parse_standardization_csv(standardization_csv(p)).empty());
  EXPECT_THROW(parse_standardization_csv("kind,drop\n"), DataError);
  EXPECT_THROW(parse_standardization_csv("kind,severity,drop,mse\nsnow,1\n"), DataError);
}

TEST(Report, TableListsEveryKind) {
  const std::string t = standardization_table(sample_profile());
  for (const char* k : {"snow_occlusion", "gaussian_blur", "adversarial", "drop std"})
    EXPECT_NE(t.find(k), std::string::npos) << k;
}
