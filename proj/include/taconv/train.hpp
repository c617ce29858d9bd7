#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <vector>

#include <nlohmann/json.hpp>

#include "taconv/dataset.hpp"
#include "taconv/network.hpp"
#include "taconv/optim.hpp"
#include "taconv/perturbations.hpp"

namespace taconv {

struct TrainConfig {
  int epochs = 5;
  int batch_size = 32;
  double lr = 0.05;
  double momentum = 0.9;
  std::uint64_t seed = 1;
  bool hflip = false;
  bool cyclic_lr = false;
  // Perturbation applied to each training image with probability augment_prob.
  std::optional<PerturbationSpec> augment;
  double augment_prob = 0.5;

  void validate() const {
    if (epochs < 0) throw Error("train: epochs must be >= 0");
    if (batch_size < 1) throw Error("train: batch_size must be >= 1");
    if (!(lr >= 0.0)) throw Error("train: lr must be >= 0");
    if (augment && augment->kind == PerturbationKind::Adversarial)
      throw Error("train: adversarial augmentation is not supported");
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"epochs", c.epochs},       {"batch_size", c.batch_size}, {"lr", c.lr},
       {"momentum", c.momentum},   {"seed", c.seed},             {"hflip", c.hflip},
       {"cyclic_lr", c.cyclic_lr}, {"augment_prob", c.augment_prob}};
  j["augment"] = c.augment ? nlohmann::json(*c.augment) : nlohmann::json(nullptr);
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  const TrainConfig d;
  c.epochs = j.value("epochs", d.epochs);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.lr = j.value("lr", d.lr);
  c.momentum = j.value("momentum", d.momentum);
  c.seed = j.value("seed", d.seed);
  c.hflip = j.value("hflip", d.hflip);
  c.cyclic_lr = j.value("cyclic_lr", d.cyclic_lr);
  c.augment_prob = j.value("augment_prob", d.augment_prob);
  if (j.contains("augment") && !j["augment"].is_null()) c.augment = j["augment"].get<PerturbationSpec>();
}

struct EpochStats {
  int epoch = 0;
  double loss = 0.0;        // mean training loss over the epoch's batches
  double train_accuracy = 0.0;
  std::optional<double> val_accuracy;
};

/// Percent of correctly classified images.
inline double accuracy(const Model& model, const Dataset& d) {
  if (!d.labeled()) throw DataError("accuracy needs labels");
  const auto pred = predict(model, d.images);
  std::size_t hit = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == d.labels[i];
  return 100.0 * static_cast<double>(hit) / static_cast<double>(pred.size());
}

namespace detail {

inline void hflip_image(double* img, std::size_t c, std::size_t h, std::size_t w) {
  for (std::size_t k = 0; k < c * h; ++k) std::reverse(img + k * w, img + (k + 1) * w);
}

}  // namespace detail

/// Minibatch SGD; deterministic for a given config. Throws NumericalError
/// naming the epoch if the loss becomes non-finite.
inline std::vector<EpochStats> train(Model& model, const Dataset& data, const TrainConfig& cfg,
                                     const Dataset* validation = nullptr) {
  cfg.validate();
  data.validate();
  if (!data.labeled()) throw DataError("train: dataset has no labels");
  if (data.num_classes > model.config().num_classes) throw DataError("train: dataset has more classes than the model");
  std::vector<Tensor> params;
  for (auto& p : model.parameters()) params.push_back(p.tensor);
  Sgd opt(params, cfg.momentum);

  const std::size_t n = data.size(), px = data.image_numel();
  const std::size_t bs = static_cast<std::size_t>(cfg.batch_size);
  const std::size_t steps_per_epoch = (n + bs - 1) / bs;
  std::vector<EpochStats> history;
  std::vector<std::size_t> order(n);
  std::size_t global_step = 0;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    Rng rng(derive_seed(cfg.seed, {static_cast<std::uint64_t>(epoch)}));
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[static_cast<std::size_t>(rng.uniform_int(static_cast<std::int64_t>(i)))]);

    double loss_sum = 0.0;
    std::size_t hits = 0;
    for (std::size_t s = 0; s < n; s += bs) {
      const std::size_t len = std::min(bs, n - s);
      Tensor x(Shape{len, data.channels(), data.height(), data.width()});
      std::vector<int> y(len);
      for (std::size_t b = 0; b < len; ++b) {
        const std::size_t idx = order[s + b];
        double* dst = x.ptr() + b * px;
        std::copy(data.images.ptr() + idx * px, data.images.ptr() + (idx + 1) * px, dst);
        y[b] = data.labels[idx];
        if (cfg.augment && rng.bernoulli(cfg.augment_prob)) {
          PerturbationSpec spec = *cfg.augment;
          spec.seed = derive_seed(cfg.seed, {static_cast<std::uint64_t>(epoch), idx});
          const Tensor p = apply_perturbation(data.image(idx), spec);
          std::copy(p.data().begin(), p.data().end(), dst);
        }
        if (cfg.hflip && rng.bernoulli(0.5)) detail::hflip_image(dst, data.channels(), data.height(), data.width());
      }
      Tape tape;
      Tensor logits, loss;
      try {
        logits = model.forward(&tape, x);
        loss = ops::softmax_cross_entropy(&tape, logits, y);
      } catch (const NumericalError& e) {
        throw NumericalError("training diverged in epoch " + std::to_string(epoch) + ": " + e.what());
      }
      if (!std::isfinite(loss.item())) throw NumericalError("training diverged in epoch " + std::to_string(epoch));
      tape.backward(loss);
      const double lr = cfg.cyclic_lr ? cyclic_lr(cfg.lr, global_step, 2 * steps_per_epoch) : cfg.lr;
      opt.step(lr);
      ++global_step;
      loss_sum += loss.item() * static_cast<double>(len);
      const std::size_t k = logits.dim(1);
      for (std::size_t b = 0; b < len; ++b) {
        const double* z = logits.ptr() + b * k;
        hits += static_cast<std::size_t>(std::max_element(z, z + k) - z) == static_cast<std::size_t>(y[b]);
      }
    }
    EpochStats st;
    st.epoch = epoch;
    st.loss = loss_sum / static_cast<double>(n);
    st.train_accuracy = 100.0 * static_cast<double>(hits) / static_cast<double>(n);
    if (validation) st.val_accuracy = accuracy(model, *validation);
    history.push_back(st);
  }
  return history;
}

}  // namespace taconv
