#pragma once

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <mutex>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "taconv/calibration.hpp"
#include "taconv/dataset.hpp"
#include "taconv/network.hpp"
#include "taconv/perturbations.hpp"
#include "taconv/train.hpp"

namespace taconv {

/// Rows are test conditions, columns are models; cells are accuracy in percent.
struct RobustnessMatrix {
  std::vector<std::string> rows;
  std::vector<std::string> cols;
  std::vector<std::string> col_transforms;  // transform built into each model, "identity" for standard
  std::vector<std::vector<double>> cells;   // [row][col]
  std::vector<std::vector<bool>> seen;      // [row][col]
  nlohmann::json meta = nlohmann::json::object();

  std::size_t row_index(const std::string& r) const {
    const auto it = std::find(rows.begin(), rows.end(), r);
    if (it == rows.end()) throw DataError("matrix has no row '" + r + "'");
    return static_cast<std::size_t>(it - rows.begin());
  }
  std::size_t col_index(const std::string& c) const {
    const auto it = std::find(cols.begin(), cols.end(), c);
    if (it == cols.end()) throw DataError("matrix has no column '" + c + "'");
    return static_cast<std::size_t>(it - cols.begin());
  }
  double at(const std::string& r, const std::string& c) const { return cells[row_index(r)][col_index(c)]; }
};

inline void to_json(nlohmann::json& j, const RobustnessMatrix& m) {
  j = {{"rows", m.rows}, {"cols", m.cols}, {"col_transforms", m.col_transforms},
       {"cells", m.cells}, {"seen", m.seen}, {"meta", m.meta}};
}

inline void from_json(const nlohmann::json& j, RobustnessMatrix& m) {
  m.rows = j.at("rows").get<std::vector<std::string>>();
  m.cols = j.at("cols").get<std::vector<std::string>>();
  m.col_transforms = j.at("col_transforms").get<std::vector<std::string>>();
  m.cells = j.at("cells").get<std::vector<std::vector<double>>>();
  m.seen = j.at("seen").get<std::vector<std::vector<bool>>>();
  m.meta = j.value("meta", nlohmann::json::object());
  if (m.cells.size() != m.rows.size() || m.seen.size() != m.rows.size()) throw DataError("matrix: row count mismatch");
  for (std::size_t r = 0; r < m.rows.size(); ++r)
    if (m.cells[r].size() != m.cols.size() || m.seen[r].size() != m.cols.size()) throw DataError("matrix: column count mismatch");
}

struct NamedModel {
  std::string name;
  const Model* model = nullptr;
};

struct EvalOptions {
  unsigned threads = 1;
  std::size_t attack_batch = 100;
};

/// Accuracy of every model on clean data, on each calibrated perturbation of
/// the profile (fixed seeds, shared by all models), and under a white-box BIM
/// attack generated against each model at the profile's epsilon. The profile
/// must belong to one of the models (checked by hash). Models are never
/// modified; their hashes are compared before and after.
inline RobustnessMatrix evaluate_matrix(const std::vector<NamedModel>& models, const Dataset& data,
                                        const SeverityProfile& profile, const EvalOptions& opt = {}) {
  if (models.empty()) throw Error("evaluate: no models");
  if (!data.labeled()) throw DataError("evaluate: dataset has no labels");
  std::vector<std::string> before;
  bool profile_owner = false;
  for (const auto& m : models) {
    if (!m.model) throw Error("evaluate: null model '" + m.name + "'");
    before.push_back(model_hash(*m.model));
    profile_owner = profile_owner || before.back() == profile.model_id;
  }
  if (!profile_owner) {
    throw CalibrationError("evaluate: severity profile was calibrated on model " + profile.model_id +
                           ", which is not among the evaluated models");
  }

  RobustnessMatrix mx;
  mx.rows.push_back("clean");
  for (const auto& e : profile.entries) mx.rows.push_back(to_string(e.spec.kind));
  for (const auto& m : models) {
    mx.cols.push_back(m.name);
    mx.col_transforms.push_back(to_string(m.model->config().transform()));
  }
  const std::size_t nr = mx.rows.size(), nc = mx.cols.size();
  mx.cells.assign(nr, std::vector<double>(nc, 0.0));
  mx.seen.assign(nr, std::vector<bool>(nc, false));
  for (std::size_t r = 1; r < nr; ++r) {
    const auto t = matching_transform(profile.entries[r - 1].spec.kind);
    for (std::size_t c = 0; c < nc; ++c)
      mx.seen[r][c] = t && models[c].model->config().has_ta_layers() && *t == models[c].model->config().transform();
  }

  // Natural perturbations do not depend on the model: perturb once per row.
  std::vector<Dataset> perturbed(nr);
  perturbed[0] = data;
  for (std::size_t r = 1; r < nr; ++r) {
    const auto& spec = profile.entries[r - 1].spec;
    if (spec.kind != PerturbationKind::Adversarial) perturbed[r] = perturb_dataset(data, spec);
  }

  std::vector<std::pair<std::size_t, std::size_t>> jobs;
  for (std::size_t r = 0; r < nr; ++r)
    for (std::size_t c = 0; c < nc; ++c) jobs.emplace_back(r, c);
  std::size_t next = 0;
  std::mutex mu;
  std::exception_ptr failure;
  auto worker = [&]() {
    for (;;) {
      std::size_t j;
      {
        std::lock_guard lock(mu);
        if (next >= jobs.size() || failure) return;
        j = next++;
      }
      const auto [r, c] = jobs[j];
      try {
        const Model local = models[c].model->clone();
        double acc;
        if (r > 0 && profile.entries[r - 1].spec.kind == PerturbationKind::Adversarial) {
          acc = accuracy(local, perturb_dataset(data, profile.entries[r - 1].spec, &local, opt.attack_batch));
        } else {
          acc = accuracy(local, perturbed[r]);
        }
        mx.cells[r][c] = acc;
      } catch (...) {
        std::lock_guard lock(mu);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  const unsigned n_threads = std::max(1u, std::min<unsigned>(opt.threads, static_cast<unsigned>(jobs.size())));
  if (n_threads == 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (unsigned t = 0; t < n_threads; ++t) pool.emplace_back(worker);
  }
  if (failure) std::rethrow_exception(failure);

  for (std::size_t c = 0; c < nc; ++c) {
    if (model_hash(*models[c].model) != before[c])
      throw Error("evaluate: parameters of model '" + models[c].name + "' changed during evaluation");
  }

  nlohmann::json sev = nlohmann::json::object(), seeds = nlohmann::json::object(), hashes = nlohmann::json::object();
  for (const auto& e : profile.entries) {
    sev[to_string(e.spec.kind)] = e.spec.severity;
    seeds[to_string(e.spec.kind)] = e.spec.seed;
  }
  for (std::size_t c = 0; c < nc; ++c) hashes[mx.cols[c]] = before[c];
  mx.meta = {{"dataset_id", dataset_id(data)},
             {"images", data.size()},
             {"profile_model_id", profile.model_id},
             {"target_drop", profile.target_drop},
             {"severities", sev},
             {"seeds", seeds},
             {"model_hashes", hashes}};
  return mx;
}

inline std::string matrix_csv(const RobustnessMatrix& m) {
  std::string out = "condition";
  for (const auto& c : m.cols) out += "," + c;
  out += "\n";
  for (std::size_t r = 0; r < m.rows.size(); ++r) {
    out += m.rows[r];
    for (double v : m.cells[r]) out += "," + detail::fmt_g17(v);
    out += "\n";
  }
  return out;
}

/// Fixed-width table; seen cells are marked with '*'.
inline std::string matrix_table(const RobustnessMatrix& m) {
  std::size_t w0 = 9;
  for (const auto& r : m.rows) w0 = std::max(w0, r.size());
  std::vector<std::size_t> w;
  for (const auto& c : m.cols) w.push_back(std::max<std::size_t>(c.size(), 8) + 2);
  std::ostringstream os;
  os << std::left << std::setw(static_cast<int>(w0)) << "condition";
  for (std::size_t c = 0; c < m.cols.size(); ++c) os << std::right << std::setw(static_cast<int>(w[c])) << m.cols[c];
  os << "\n" << std::fixed << std::setprecision(2);
  for (std::size_t r = 0; r < m.rows.size(); ++r) {
    os << std::left << std::setw(static_cast<int>(w0)) << m.rows[r];
    for (std::size_t c = 0; c < m.cols.size(); ++c) {
      std::ostringstream cell;
      cell << std::fixed << std::setprecision(2) << m.cells[r][c] << (m.seen[r][c] ? "*" : " ");
      os << std::right << std::setw(static_cast<int>(w[c])) << cell.str();
    }
    os << "\n";
  }
  return os.str();
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open '" + path.string() + "' for writing");
  f << text;
  if (!f) throw DataError("failed writing '" + path.string() + "'");
}

/// Writes <stem>.csv, <stem>.json and <stem>.txt.
inline void export_report(const RobustnessMatrix& m, const std::filesystem::path& stem) {
  if (stem.has_parent_path()) std::filesystem::create_directories(stem.parent_path());
  write_text(stem.string() + ".csv", matrix_csv(m));
  write_text(stem.string() + ".json", nlohmann::json(m).dump(2) + "\n");
  write_text(stem.string() + ".txt", matrix_table(m));
}

inline RobustnessMatrix load_matrix(const std::filesystem::path& path) {
  try {
    return nlohmann::json::parse(detail::read_file(path.string())).get<RobustnessMatrix>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError("matrix '" + path.string() + "': " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Filter grids

/// rows x cols tiles of equal size.
struct FilterGrid {
  std::vector<std::vector<Plane>> tiles;
};

/// One row per branch, one column per basis function.
inline FilterGrid filter_grid(const BasisBank& bank) {
  FilterGrid g;
  for (std::size_t b = 0; b < bank.size(); ++b) {
    std::vector<Plane> row;
    for (std::size_t i = 0; i < bank.n_basis(); ++i) row.push_back(basis_plane(bank.branch(b), i));
    g.tiles.push_back(std::move(row));
  }
  return g;
}

/// First-layer filters: one row per branch of a TAConv layer (one row for a
/// plain conv), one column per synthesized filter, at most max_filters.
inline FilterGrid filter_grid(const Model& model, std::size_t max_filters = 16) {
  FilterGrid g;
  const auto& first = model.layers().front();
  auto add_row = [&](const Tensor& k) {
    const int kh = static_cast<int>(k.dim(2)), kw = static_cast<int>(k.dim(3));
    const std::size_t px = static_cast<std::size_t>(kh) * kw, n = std::min(max_filters, k.dim(0) * k.dim(1));
    std::vector<Plane> row;
    for (std::size_t f = 0; f < n; ++f)
      row.emplace_back(kh, kw, std::vector<double>(k.ptr() + f * px, k.ptr() + (f + 1) * px));
    g.tiles.push_back(std::move(row));
  };
  if (const auto* t = std::get_if<TAConvLayer>(&first)) {
    for (std::size_t b = 0; b < t->branches(); ++b) add_row(t->kernels(nullptr, b, false));
  } else if (const auto* c = std::get_if<ConvLayer>(&first)) {
    add_row(c->kernel);
  } else if (const auto* r = std::get_if<TAResBlock>(&first)) {
    for (std::size_t b = 0; b < r->branches(); ++b) add_row(r->kernels(nullptr, r->w1, b, false));
  } else {
    add_row(std::get<ResBlock>(first).k1);
  }
  return g;
}

/// Tiled 8-bit PGM with a 1-pixel black gap; gray = round(255 (v - min) / (max - min)).
/// The sidecar <path>.json records min, max and the layout.
inline void export_filter_grid(const FilterGrid& g, const std::filesystem::path& path) {
  if (g.tiles.empty() || g.tiles.front().empty()) throw ShapeError("filter grid is empty");
  const int th = g.tiles[0][0].rows, tw = g.tiles[0][0].cols, gap = 1;
  const int nrows = static_cast<int>(g.tiles.size()), ncols = static_cast<int>(g.tiles[0].size());
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (const auto& row : g.tiles) {
    if (static_cast<int>(row.size()) != ncols) throw ShapeError("filter grid rows differ in length");
    for (const auto& t : row) {
      if (t.rows != th || t.cols != tw) throw ShapeError("filter grid tiles differ in size");
      for (double v : t.v) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
      }
    }
  }
  const int H = nrows * th + (nrows - 1) * gap, W = ncols * tw + (ncols - 1) * gap;
  Tensor img(Shape{1, static_cast<std::size_t>(H), static_cast<std::size_t>(W)}, 0.0);
  const double range = hi - lo;
  for (int r = 0; r < nrows; ++r)
    for (int c = 0; c < ncols; ++c)
      for (int i = 0; i < th; ++i)
        for (int j = 0; j < tw; ++j) {
          const double v = g.tiles[static_cast<std::size_t>(r)][static_cast<std::size_t>(c)](i, j);
          img[static_cast<std::size_t>(r * (th + gap) + i) * W + static_cast<std::size_t>(c * (tw + gap) + j)] =
              range > 0.0 ? (v - lo) / range : 0.0;
        }
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  write_pnm(img, path.string());
  const nlohmann::json side = {{"min", lo},      {"max", hi},   {"rows", nrows}, {"cols", ncols},
                               {"tile_rows", th}, {"tile_cols", tw}, {"gap", gap}};
  write_text(path.string() + ".json", side.dump(2) + "\n");
}

}  // namespace taconv
