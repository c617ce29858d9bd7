// taconv: command-line front end for training, calibration and robustness
// evaluation of transform-augmented convolutional networks.
//
// Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "taconv/taconv.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace taconv;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

json default_config() {
  return {
      {"seed", 1},
      {"data",
       {{"source", "synthetic"},
        {"classes", 8},
        {"size", 20},
        {"train_per_class", 500},
        {"test_per_class", 250},
        {"train_seed", 11},
        {"test_seed", 12},
        {"calibration_size", 1000}}},
      {"model", {{"branches", 4}, {"bank_seed", 7}}},
      {"train", TrainConfig{}},
      {"calibration",
       {{"target_drop", 10.0},
        {"tol", 1.0},
        {"kinds",
         {"rotation_scaling", "elastic", "gaussian_blur", "gaussian_noise", "object_occlusion", "snow_occlusion",
          "adversarial"}}}},
  };
}

json load_config(const std::string& path) {
  json cfg = default_config();
  if (path.empty()) return cfg;
  json user;
  try {
    user = json::parse(detail::read_file(path));
  } catch (const json::parse_error& e) {
    throw UsageError("config '" + path + "': " + e.what());
  }
  cfg.merge_patch(user);
  return cfg;
}

struct Context {
  json config;
  std::uint64_t seed = 1;
  fs::path out = ".";
  unsigned threads = 1;
  std::vector<std::string> argv;

  std::uint64_t stream(std::uint64_t tag) const { return derive_seed(seed, {tag}); }

  void write_run(const fs::path& dir, const std::string& command, const json& extra = json::object()) const {
    fs::create_directories(dir);
    json run = {{"command", command}, {"config", config}, {"seed", seed}, {"threads", threads}};
    for (const auto& [k, v] : extra.items()) run[k] = v;
    write_text(dir / "run.json", run.dump(2) + "\n");
  }
};

/// "synthetic" or a path to an IDX image file / PGM-PPM directory.
/// split: "train", "test", "calib" (first calibration_size test images),
/// "eval" (the rest of the test set) or "all".
Dataset load_data(const Context& ctx, const std::string& source, const std::string& split) {
  const json& d = ctx.config.at("data");
  const std::size_t calib = d.at("calibration_size").get<std::size_t>();
  Dataset full;
  if (source == "synthetic") {
    SynthOptions opt;
    opt.size = d.at("size").get<int>();
    const int classes = d.at("classes").get<int>();
    if (split == "train")
      return synth_dataset(d.at("train_per_class").get<int>(), classes, d.at("train_seed").get<std::uint64_t>(), opt);
    full = synth_dataset(d.at("test_per_class").get<int>(), classes, d.at("test_seed").get<std::uint64_t>(), opt);
  } else if (fs::is_directory(source)) {
    full = load_pnm_dir(source);
  } else {
    full = load_idx(source);
  }
  if (split == "all" || split == "train" || split == "test") return full;
  if (split == "calib") return full.slice(0, std::min(calib, full.size()));
  if (split == "eval") {
    if (calib >= full.size()) throw DataError("no images left after the calibration slice");
    return full.slice(calib, full.size());
  }
  throw UsageError("unknown split '" + split + "'");
}

NetworkConfig network_for(const Context& ctx, const std::string& variant) {
  const json& m = ctx.config.at("model");
  if (m.contains("network")) return m.at("network").get<NetworkConfig>();
  const json& d = ctx.config.at("data");
  NetworkConfig c;
  if (variant == "standard") {
    c = NetworkConfig::desk();
  } else {
    c = NetworkConfig::desk(transform_kind_from_string(variant), true, m.at("bank_seed").get<std::uint64_t>(),
                            m.at("branches").get<int>());
  }
  c.height = c.width = d.at("size").get<int>();
  c.num_classes = d.at("classes").get<int>();
  return c;
}

PerturbationSpec perturbation_from_config(const Context& ctx, PerturbationKind kind) {
  PerturbationSpec spec;
  const json& cal = ctx.config.at("calibration");
  if (cal.contains("overrides") && cal["overrides"].contains(to_string(kind))) {
    json o = cal["overrides"][to_string(kind)];
    o["kind"] = to_string(kind);
    spec = o.get<PerturbationSpec>();
  }
  spec.kind = kind;
  return spec;
}

void print_history(const std::vector<EpochStats>& h) {
  for (const auto& e : h) {
    std::cout << "epoch " << e.epoch << "  loss " << e.loss << "  train " << e.train_accuracy << "%";
    if (e.val_accuracy) std::cout << "  test " << *e.val_accuracy << "%";
    std::cout << "\n";
  }
}

int run(int argc, char** argv) {
  CLI::App app{"Transform-augmented convolutions: training and robustness evaluation"};
  app.require_subcommand(1);
  std::string config_path;
  std::uint64_t seed_flag = 0;
  bool seed_given = false;
  std::string out_dir = ".";
  unsigned threads = 1;
  app.add_option("--config", config_path, "JSON config file")->check(CLI::ExistingFile);
  auto* seed_opt = app.add_option("--seed", seed_flag, "Master seed (overrides the config)");
  app.add_option("--out", out_dir, "Output directory");
  app.add_option("--threads", threads, "Evaluation worker threads")->check(CLI::Range(1u, 256u));

  // basis export
  auto* basis = app.add_subcommand("basis", "Basis utilities");
  basis->require_subcommand(1);
  auto* bexport = basis->add_subcommand("export", "Render the (transformed) basis as a PGM grid");
  std::string b_transform = "identity";
  bexport->add_option("--transform", b_transform, "Transform kind of the extra branches");

  // train
  auto* train_cmd = app.add_subcommand("train", "Train a network");
  std::string variant = "standard", save_path, transfer_from, train_data = "synthetic";
  train_cmd->add_option("--variant", variant, "standard or a transform kind for a TAConv first layer");
  train_cmd->add_option("--save", save_path, "Checkpoint path (default <out>/<variant>.ckpt)");
  train_cmd->add_option("--transfer-from", transfer_from, "Initialize from a trained standard checkpoint")
      ->check(CLI::ExistingFile);
  train_cmd->add_option("--data", train_data, "synthetic, IDX image file or PGM/PPM directory");

  // calibrate
  auto* cal_cmd = app.add_subcommand("calibrate", "Standardize perturbation severities on a model");
  std::string cal_model, cal_data = "synthetic", cal_split = "calib", cal_out, cal_kinds;
  std::optional<double> target_drop, tol;
  cal_cmd->add_option("--model", cal_model, "Checkpoint")->required()->check(CLI::ExistingFile);
  cal_cmd->add_option("--data", cal_data, "Data source");
  cal_cmd->add_option("--split", cal_split, "Data split");
  cal_cmd->add_option("--target-drop", target_drop, "Accuracy drop in points");
  cal_cmd->add_option("--tol", tol, "Tolerance in points");
  cal_cmd->add_option("--kinds", cal_kinds, "Comma-separated perturbation kinds");
  cal_cmd->add_option("--out", cal_out, "Profile JSON path")->required();

  // perturb
  auto* pert_cmd = app.add_subcommand("perturb", "Write perturbed copies of a dataset");
  std::string p_data = "synthetic", p_split = "test", p_kind;
  double p_severity = 0.0;
  std::size_t p_limit = 64;
  pert_cmd->add_option("--data", p_data, "Data source");
  pert_cmd->add_option("--split", p_split, "Data split");
  pert_cmd->add_option("--kind", p_kind, "Perturbation kind")->required();
  pert_cmd->add_option("--severity", p_severity, "Severity")->required()->check(CLI::NonNegativeNumber);
  pert_cmd->add_option("--limit", p_limit, "Number of images written");

  // attack
  auto* atk_cmd = app.add_subcommand("attack", "BIM adversarial copies of a dataset");
  std::string a_model, a_data = "synthetic", a_split = "test";
  AttackSpec a_spec;
  std::size_t a_limit = 64;
  atk_cmd->add_option("--model", a_model, "Checkpoint")->required()->check(CLI::ExistingFile);
  atk_cmd->add_option("--data", a_data, "Data source");
  atk_cmd->add_option("--split", a_split, "Data split");
  atk_cmd->add_option("--epsilon", a_spec.epsilon, "l-inf budget in [0, 1] pixel units")->required();
  atk_cmd->add_option("--steps", a_spec.steps, "Iterations");
  atk_cmd->add_option("--step-size", a_spec.step_size, "Per-step size (default 2.5 eps / steps)");
  atk_cmd->add_option("--limit", a_limit, "Number of images attacked and written");

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "Robustness matrix of one or more models");
  std::vector<std::string> loads;
  std::string e_profile, e_data = "synthetic", e_split = "eval";
  eval_cmd->add_option("--load", loads, "Checkpoints (repeatable)")->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--profile", e_profile, "Severity profile")->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--data", e_data, "Data source");
  eval_cmd->add_option("--split", e_split, "Data split");

  // report
  auto* rep_cmd = app.add_subcommand("report", "CSV/JSON/text reports from a matrix and profile");
  std::string r_matrix, r_profile;
  rep_cmd->add_option("--matrix", r_matrix, "Matrix JSON from eval")->required()->check(CLI::ExistingFile);
  rep_cmd->add_option("--profile", r_profile, "Severity profile")->check(CLI::ExistingFile);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }
  seed_given = seed_opt->count() > 0;

  Context ctx;
  ctx.config = load_config(config_path);
  ctx.seed = seed_given ? seed_flag : ctx.config.at("seed").get<std::uint64_t>();
  ctx.config["seed"] = ctx.seed;
  ctx.out = out_dir;
  ctx.threads = threads;
  for (int i = 0; i < argc; ++i) ctx.argv.emplace_back(argv[i]);

  if (bexport->parsed()) {
    const auto kind = transform_kind_from_string(b_transform);
    const json& m = ctx.config.at("model");
    const int extra = kind == TransformKind::Identity ? 0 : m.at("branches").get<int>();
    const BasisBank bank = make_bank_spec(BasisSpec::make(5, 1.5), kind, extra, m.at("bank_seed").get<std::uint64_t>()).build();
    const fs::path path = ctx.out / ("basis_" + to_string(kind) + ".pgm");
    export_filter_grid(filter_grid(bank), path);
    ctx.write_run(ctx.out, "basis export", {{"transform", to_string(kind)}});
    std::cout << "wrote " << path.string() << " (" << bank.size() << " x " << bank.n_basis() << " tiles)\n";
    return 0;
  }

  if (train_cmd->parsed()) {
    const Dataset train_set = load_data(ctx, train_data, "train");
    const Dataset test_set = load_data(ctx, train_data, "test");
    NetworkConfig net = network_for(ctx, variant);
    net.in_channels = static_cast<int>(train_set.channels());
    net.height = static_cast<int>(train_set.height());
    net.width = static_cast<int>(train_set.width());
    net.num_classes = std::max(net.num_classes, train_set.num_classes);
    Model model = Model::assemble(net, ctx.stream(1));
    if (!transfer_from.empty()) weight_transfer(load_checkpoint(transfer_from), model);
    TrainConfig tc = ctx.config.at("train").get<TrainConfig>();
    tc.seed = ctx.stream(2);
    if (tc.augment) tc.augment->seed = ctx.stream(3);
    const auto history = train(model, train_set, tc, &test_set);
    print_history(history);
    const fs::path ckpt = save_path.empty() ? ctx.out / (net.name + ".ckpt") : fs::path(save_path);
    if (ckpt.has_parent_path()) fs::create_directories(ckpt.parent_path());
    save_checkpoint(model, ckpt.string());
    json hist = json::array();
    for (const auto& e : history) {
      json h = {{"epoch", e.epoch}, {"loss", e.loss}, {"train_accuracy", e.train_accuracy}};
      if (e.val_accuracy) h["test_accuracy"] = *e.val_accuracy;
      hist.push_back(h);
    }
    ctx.write_run(ckpt.has_parent_path() ? ckpt.parent_path() : fs::path("."), "train",
                  {{"variant", variant}, {"checkpoint", ckpt.string()}, {"model_hash", model_hash(model)},
                   {"history", hist}, {"network", net}, {"resolved_train", tc}});
    std::cout << "saved " << ckpt.string() << " (" << model.parameter_count() << " parameters)\n";
    return 0;
  }

  if (cal_cmd->parsed()) {
    const Model model = load_checkpoint(cal_model);
    const Dataset eval = load_data(ctx, cal_data, cal_split);
    json& cc = ctx.config["calibration"];
    if (target_drop) cc["target_drop"] = *target_drop;
    if (tol) cc["tol"] = *tol;
    std::vector<PerturbationKind> kinds;
    if (!cal_kinds.empty()) {
      std::stringstream ss(cal_kinds);
      std::string k;
      cc["kinds"] = json::array();
      while (std::getline(ss, k, ',')) cc["kinds"].push_back(k);
    }
    std::map<PerturbationKind, PerturbationSpec> overrides;
    for (const auto& k : cc.at("kinds")) {
      const auto kind = perturbation_kind_from_string(k.get<std::string>());
      kinds.push_back(kind);
      overrides[kind] = perturbation_from_config(ctx, kind);
    }
    const auto profile = build_profile(model, eval, kinds, cc.at("target_drop").get<double>(), cc.at("tol").get<double>(),
                                       ctx.stream(4), overrides, [](const std::string& s) { std::cout << s << "\n"; });
    const fs::path out = cal_out;
    if (out.has_parent_path()) fs::create_directories(out.parent_path());
    write_text(out, json(profile).dump(2) + "\n");
    std::cout << standardization_table(profile);
    ctx.write_run(out.has_parent_path() ? out.parent_path() : fs::path("."), "calibrate",
                  {{"model", cal_model}, {"profile", out.string()}});
    return 0;
  }

  if (pert_cmd->parsed() || atk_cmd->parsed()) {
    const bool attack = atk_cmd->parsed();
    Dataset data = load_data(ctx, attack ? a_data : p_data, attack ? a_split : p_split);
    const std::size_t limit = attack ? a_limit : p_limit;
    if (limit > 0 && limit < data.size()) data = data.slice(0, limit);
    PerturbationSpec spec;
    std::optional<Model> model;
    if (attack) {
      model = load_checkpoint(a_model);
      spec.kind = PerturbationKind::Adversarial;
      spec.severity = a_spec.epsilon;
      spec.attack_steps = a_spec.steps;
      spec.attack_step_size = a_spec.step_size;
    } else {
      spec = perturbation_from_config(ctx, perturbation_kind_from_string(p_kind));
      spec.severity = p_severity;
    }
    spec.seed = ctx.stream(5);
    const Dataset out = perturb_dataset(data, spec, model ? &*model : nullptr);
    fs::create_directories(ctx.out);
    for (std::size_t i = 0; i < out.size(); ++i) {
      std::ostringstream name;
      if (out.labeled()) name << out.labels[i] << "_";
      name << std::setw(5) << std::setfill('0') << i << (out.channels() == 1 ? ".pgm" : ".ppm");
      write_pnm(out.image(i), (ctx.out / name.str()).string());
    }
    const json manifest = {{"kind", to_string(spec.kind)},
                           {"severity", spec.severity},
                           {"seed", spec.seed},
                           {"images", out.size()},
                           {"mse", mse_pair(data.images, out.images)},
                           {"mse_255", mse_pair(data.images, out.images, 255.0)},
                           {"spec", spec}};
    write_text(ctx.out / "manifest.json", manifest.dump(2) + "\n");
    ctx.write_run(ctx.out, attack ? "attack" : "perturb");
    std::cout << "wrote " << out.size() << " images to " << ctx.out.string() << " (mse " << manifest["mse"] << ")\n";
    return 0;
  }

  if (eval_cmd->parsed()) {
    const Dataset data = load_data(ctx, e_data, e_split);
    const SeverityProfile profile = json::parse(detail::read_file(e_profile)).get<SeverityProfile>();
    std::vector<Model> models;
    for (const auto& p : loads) models.push_back(load_checkpoint(p));
    std::vector<NamedModel> named;
    std::map<std::string, int> seen_names;
    for (std::size_t i = 0; i < models.size(); ++i) {
      std::string name = models[i].name();
      if (seen_names[name]++ > 0) name += "_" + std::to_string(seen_names[name]);
      named.push_back({name, &models[i]});
    }
    EvalOptions opt;
    opt.threads = ctx.threads;
    const RobustnessMatrix m = evaluate_matrix(named, data, profile, opt);
    fs::create_directories(ctx.out);
    write_text(ctx.out / "matrix.json", json(m).dump(2) + "\n");
    std::cout << matrix_table(m);
    ctx.write_run(ctx.out, "eval", {{"models", loads}, {"profile", e_profile}});
    return 0;
  }

  if (rep_cmd->parsed()) {
    const RobustnessMatrix m = load_matrix(r_matrix);
    export_report(m, ctx.out / "report");
    if (!r_profile.empty()) {
      const SeverityProfile profile = json::parse(detail::read_file(r_profile)).get<SeverityProfile>();
      write_text(ctx.out / "standardization.csv", standardization_csv(profile));
      write_text(ctx.out / "standardization.txt", standardization_table(profile));
    }
    std::cout << matrix_table(m);
    ctx.write_run(ctx.out, "report", {{"matrix", r_matrix}});
    return 0;
  }
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const json::exception& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const ShapeError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 2;
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return 3;
  } catch (const CalibrationError& e) {
    std::cerr << "calibration failed: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
