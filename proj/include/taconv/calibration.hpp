#pragma once

// Severity standardization: for each perturbation kind, find the severity
// at which a reference model loses `target_drop` accuracy points.
//
// Search: a coarse grid over [0, s_max] checks that the drop grows with
// severity (within a slack), brackets the target, and bisection refines the
// bracket until a probe lands within tol of the target.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "taconv/dataset.hpp"
#include "taconv/error.hpp"
#include "taconv/network.hpp"
#include "taconv/perturbations.hpp"
#include "taconv/train.hpp"

namespace taconv {

struct CalibrationOptions {
  double s_max = 1.0;
  double resolution = 0.0;      // 0 -> s_max / 256
  int grid = 6;                 // coarse grid points, excluding 0
  double monotone_slack = -1.0;  // < 0 -> tol

  double delta() const { return resolution > 0.0 ? resolution : s_max / 256.0; }
};

struct CalibrationResult {
  double severity = 0.0;
  double achieved_drop = 0.0;
  int probes = 0;       // bisection probes
  int evaluations = 0;  // all accuracy evaluations, grid included
  std::vector<std::pair<double, double>> trace;  // (severity, drop) in evaluation order
};

/// Upper bound on bisection probes for a bracket of width s_max at resolution delta.
inline int max_bisection_probes(double s_max, double delta) {
  return static_cast<int>(std::ceil(std::log2(s_max / delta)));
}

using AccuracyAt = std::function<double(double severity)>;

/// `accuracy_at(s)` must be a deterministic function of s (fixed seeds).
inline CalibrationResult calibrate_severity(const AccuracyAt& accuracy_at, double clean_accuracy, double target_drop,
                                            double tol, const CalibrationOptions& opt, const std::string& name) {
  if (target_drop < 0.0) throw CalibrationError(name + ": target drop must be >= 0");
  if (!(tol > 0.0)) throw CalibrationError(name + ": tolerance must be > 0");
  if (!(opt.s_max > 0.0) || opt.grid < 1) throw CalibrationError(name + ": invalid search range");
  if (target_drop >= clean_accuracy) {
    throw CalibrationError(name + ": target drop " + std::to_string(target_drop) + " is not below clean accuracy " +
                           std::to_string(clean_accuracy));
  }
  CalibrationResult r;
  if (target_drop == 0.0) return r;

  auto probe = [&](double s) {
    const double drop = clean_accuracy - accuracy_at(s);
    ++r.evaluations;
    r.trace.emplace_back(s, drop);
    return drop;
  };
  auto done = [&](double s, double drop) {
    r.severity = s;
    r.achieved_drop = drop;
    return std::abs(drop - target_drop) <= tol;
  };

  const double slack = opt.monotone_slack >= 0.0 ? opt.monotone_slack : tol;
  std::vector<double> gs{0.0}, gd{0.0};
  for (int j = 1; j <= opt.grid; ++j) {
    const double s = opt.s_max * j / opt.grid;
    gs.push_back(s);
    gd.push_back(probe(s));
  }
  for (std::size_t j = 1; j < gd.size(); ++j) {
    if (gd[j] < gd[j - 1] - slack) {
      std::ostringstream os;
      os << name << ": accuracy drop is not monotone in severity (" << gd[j - 1] << " at " << gs[j - 1] << ", " << gd[j]
         << " at " << gs[j] << ")";
      throw CalibrationError(os.str());
    }
  }
  const double max_drop = *std::max_element(gd.begin(), gd.end());
  if (max_drop < target_drop - tol) {
    throw CalibrationError(name + ": target drop " + std::to_string(target_drop) + " unreachable below severity " +
                           std::to_string(opt.s_max) + " (max drop " + std::to_string(max_drop) + ")");
  }
  // Bracket: first grid point whose drop reaches the band.
  std::size_t hi_j = 1;
  while (gd[hi_j] < target_drop - tol) ++hi_j;
  if (done(gs[hi_j], gd[hi_j])) return r;
  double lo = gs[hi_j - 1], hi = gs[hi_j];
  double best_s = gs[hi_j], best_d = gd[hi_j];
  const int limit = max_bisection_probes(hi - lo, opt.delta());
  while (r.probes < limit) {
    const double mid = 0.5 * (lo + hi);
    const double d = probe(mid);
    ++r.probes;
    if (std::abs(d - target_drop) < std::abs(best_d - target_drop)) {
      best_s = mid;
      best_d = d;
    }
    if (done(mid, d)) return r;
    (d < target_drop ? lo : hi) = mid;
  }
  r.severity = best_s;
  r.achieved_drop = best_d;
  std::ostringstream os;
  os << name << ": no severity within " << tol << " points of the target drop " << target_drop
     << " (closest: drop " << best_d << " at severity " << best_s << ")";
  throw CalibrationError(os.str());
}

/// Default search ceiling per kind, in that kind's severity units.
inline double default_s_max(PerturbationKind k) {
  switch (k) {
    case PerturbationKind::RotationScaling: return 1.0;
    case PerturbationKind::Elastic: return 8.0;
    case PerturbationKind::GaussianBlur: return 4.0;
    case PerturbationKind::GaussianNoise: return 1.0;
    case PerturbationKind::ObjectOcclusion: return 0.6;
    case PerturbationKind::Snow: return 32.0;
    case PerturbationKind::Wave: return 6.0;
    case PerturbationKind::Saturation: return 60.0;
    case PerturbationKind::Adversarial: return 0.25;
  }
  return 1.0;
}

/// Calibrates one perturbation kind on a model and evaluation set. `base`
/// carries the kind, seed and kind-specific extras; its severity is ignored.
inline CalibrationResult calibrate_severity(const Model& model, const Dataset& eval, const PerturbationSpec& base,
                                            double target_drop, double tol, CalibrationOptions opt = {},
                                            std::optional<double> clean_accuracy = std::nullopt) {
  const double clean = clean_accuracy ? *clean_accuracy : accuracy(model, eval);
  auto acc = [&](double s) {
    PerturbationSpec spec = base;
    spec.severity = s;
    return accuracy(model, perturb_dataset(eval, spec, &model));
  };
  return calibrate_severity(acc, clean, target_drop, tol, opt, to_string(base.kind));
}

struct ProfileEntry {
  PerturbationSpec spec;  // calibrated severity included
  double achieved_drop = 0.0;
  double mse = 0.0;       // 8-bit pixel scale
  int probes = 0;
};

struct SeverityProfile {
  double target_drop = 10.0;
  double tol = 1.0;
  double clean_accuracy = 0.0;
  std::string model_id;
  std::string dataset_id;
  std::vector<ProfileEntry> entries;

  const ProfileEntry* find(PerturbationKind k) const {
    for (const auto& e : entries)
      if (e.spec.kind == k) return &e;
    return nullptr;
  }

  /// Population standard deviation of the achieved drops.
  double drop_std() const {
    if (entries.empty()) return 0.0;
    double mean = 0.0;
    for (const auto& e : entries) mean += e.achieved_drop;
    mean /= static_cast<double>(entries.size());
    double var = 0.0;
    for (const auto& e : entries) var += (e.achieved_drop - mean) * (e.achieved_drop - mean);
    return std::sqrt(var / static_cast<double>(entries.size()));
  }
};

inline void to_json(nlohmann::json& j, const SeverityProfile& p) {
  nlohmann::json entries = nlohmann::json::object();
  for (const auto& e : p.entries) {
    entries[to_string(e.spec.kind)] = {{"severity", e.spec.severity}, {"achieved_drop", e.achieved_drop},
                                       {"achieved_mse", e.mse},      {"probes", e.probes},
                                       {"spec", e.spec}};
  }
  j = {{"target_drop", p.target_drop}, {"tol", p.tol},         {"clean_accuracy", p.clean_accuracy},
       {"model_id", p.model_id},       {"dataset_id", p.dataset_id}, {"drop_std", p.drop_std()},
       {"entries", entries}};
}

inline void from_json(const nlohmann::json& j, SeverityProfile& p) {
  p.target_drop = j.at("target_drop").get<double>();
  p.tol = j.at("tol").get<double>();
  p.clean_accuracy = j.at("clean_accuracy").get<double>();
  p.model_id = j.at("model_id").get<std::string>();
  p.dataset_id = j.at("dataset_id").get<std::string>();
  p.entries.clear();
  for (const auto& [name, e] : j.at("entries").items()) {
    ProfileEntry pe;
    pe.spec = e.at("spec").get<PerturbationSpec>();
    pe.spec.severity = e.at("severity").get<double>();
    pe.achieved_drop = e.at("achieved_drop").get<double>();
    pe.mse = e.at("achieved_mse").get<double>();
    pe.probes = e.value("probes", 0);
    p.entries.push_back(pe);
  }
  // JSON objects are key-sorted; restore the canonical kind order.
  std::stable_sort(p.entries.begin(), p.entries.end(),
                   [](const ProfileEntry& a, const ProfileEntry& b) { return a.spec.kind < b.spec.kind; });
}

using ProgressFn = std::function<void(const std::string&)>;

/// Calibrates every requested kind in order. Each kind perturbs with the
/// stream derive_seed(seed, kind), fixed for all probes.
inline SeverityProfile build_profile(const Model& model, const Dataset& eval, const std::vector<PerturbationKind>& kinds,
                                     double target_drop, double tol, std::uint64_t seed = 0,
                                     const std::map<PerturbationKind, PerturbationSpec>& overrides = {},
                                     const ProgressFn& progress = {}) {
  SeverityProfile p;
  p.target_drop = target_drop;
  p.tol = tol;
  p.model_id = model_hash(model);
  p.dataset_id = dataset_id(eval);
  p.clean_accuracy = accuracy(model, eval);
  for (auto k : kinds) {
    PerturbationSpec spec;
    if (auto it = overrides.find(k); it != overrides.end()) spec = it->second;
    spec.kind = k;
    spec.seed = derive_seed(seed, {static_cast<std::uint64_t>(k)});
    CalibrationOptions opt;
    opt.s_max = default_s_max(k);
    const auto r = calibrate_severity(model, eval, spec, target_drop, tol, opt, p.clean_accuracy);
    spec.severity = r.severity;
    ProfileEntry e;
    e.spec = spec;
    e.achieved_drop = r.achieved_drop;
    e.probes = r.probes;
    e.mse = mse_pair(eval.images, perturb_dataset(eval, spec, &model).images, 255.0);
    p.entries.push_back(e);
    if (progress) {
      std::ostringstream os;
      os << to_string(k) << ": severity " << r.severity << ", drop " << r.achieved_drop << " (" << r.evaluations
         << " evaluations)";
      progress(os.str());
    }
  }
  return p;
}

struct ReportRow {
  std::string kind;
  double severity = 0.0;
  double drop = 0.0;
  double mse = 0.0;
};

namespace detail {

inline std::string fmt_g17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace detail

inline std::string standardization_csv(const SeverityProfile& p) {
  std::string out = "kind,severity,drop,mse\n";
  for (const auto& e : p.entries) {
    out += to_string(e.spec.kind) + "," + detail::fmt_g17(e.spec.severity) + "," + detail::fmt_g17(e.achieved_drop) +
           "," + detail::fmt_g17(e.mse) + "\n";
  }
  return out;
}

inline std::string standardization_table(const SeverityProfile& p) {
  std::ostringstream os;
  os << std::left << std::setw(18) << "kind" << std::right << std::setw(12) << "severity" << std::setw(10) << "drop"
     << std::setw(12) << "mse" << "\n";
  os << std::fixed;
  for (const auto& e : p.entries) {
    os << std::left << std::setw(18) << to_string(e.spec.kind) << std::right << std::setprecision(4) << std::setw(12)
       << e.spec.severity << std::setprecision(2) << std::setw(10) << e.achieved_drop << std::setw(12) << e.mse << "\n";
  }
  os << "clean accuracy " << std::setprecision(2) << p.clean_accuracy << ", target drop " << p.target_drop
     << ", drop std " << p.drop_std() << "\n";
  return os.str();
}

inline std::vector<ReportRow> parse_standardization_csv(const std::string& csv) {
  std::istringstream is(csv);
  std::string line;
  if (!std::getline(is, line) || line != "kind,severity,drop,mse") throw DataError("standardization csv: bad header");
  std::vector<ReportRow> rows;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    ReportRow r;
    std::string sev, drop, mse;
    if (!std::getline(ls, r.kind, ',') || !std::getline(ls, sev, ',') || !std::getline(ls, drop, ',') ||
        !std::getline(ls, mse)) {
      throw DataError("standardization csv: malformed row '" + line + "'");
    }
    r.severity = std::stod(sev);
    r.drop = std::stod(drop);
    r.mse = std::stod(mse);
    rows.push_back(r);
  }
  return rows;
}

}  // namespace taconv
