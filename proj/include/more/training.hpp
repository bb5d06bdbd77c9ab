#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "more/attacks.hpp"
#include "more/dataset.hpp"
#include "more/model.hpp"
#include "more/threat.hpp"
#include "more/weather.hpp"

namespace more {

struct TrainConfig {
  int epochs = 30;
  std::size_t batch_size = 128;
  float lr = 0.1f;
  float lr_decay = 0.05f;  // lr_epoch = lr · (1 − lr_decay)^epoch
  float momentum = 0.9f;
  std::uint64_t seed = 0;
  // Attack radii and step sizes ramp linearly from 1/n to full strength over
  // the first `warmup_epochs` epochs; 0 trains at full strength throughout.
  int warmup_epochs = 0;

  float lr_at(int epoch) const;
  void validate() const;
  std::string describe() const;
};

struct EpochRecord {
  int epoch = 0;
  float lr = 0.0f;
  double loss = 0.0;       // mean training objective over the epoch
  double clean_acc = 0.0;  // on a fixed prefix of the training set
  std::string to_json() const;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

struct Expert {
  Model model;
  std::string provenance;  // "clean", "adv(...)", "weather(...)", "max(...)", ...
  std::uint64_t fingerprint = 0;
};

/// Produces the loss gradient for one minibatch. `global_batch` counts
/// batches across epochs and seeds the per-batch attack streams.
struct BatchContext {
  const Model& model;
  const Tensor& x;
  std::span<const int> labels;
  std::span<const std::size_t> indices;
  std::uint64_t global_batch;
  std::uint64_t seed;
  float radius_scale = 1.0f;
};
using BatchObjective = std::function<double(const BatchContext&, std::vector<Tensor>& grads)>;

/// Mini-batch SGD over a seeded per-epoch shuffle, starting from `init`.
Model train_loop(Model init, const Dataset& data, const TrainConfig& cfg, const BatchObjective& objective,
                 const EpochCallback& on_epoch = {});

/// Mean cross-entropy of `model` on x and its parameter gradients.
double loss_and_grads(const Model& model, const Tensor& x, std::span<const int> labels, std::vector<Tensor>& grads);

Expert train_clean(const Dataset& data, const ArchSpec& arch, const TrainConfig& cfg, const EpochCallback& on_epoch = {});
Expert train_adversarial(const Dataset& data, const ArchSpec& arch, const AttackSpec& attack, const TrainConfig& cfg,
                         const EpochCallback& on_epoch = {});
Expert train_weather(const Dataset& data, const ArchSpec& arch, const PerturbSpec& spec, const TrainConfig& cfg,
                     const EpochCallback& on_epoch = {});

/// Worst-loss example per input across the threats.
Expert train_max(const Dataset& data, const ArchSpec& arch, std::span<const Threat> threats, const TrainConfig& cfg,
                 const EpochCallback& on_epoch = {});
Expert train_max(const Dataset& data, const ArchSpec& arch, std::span<const AttackSpec> attacks,
                 const TrainConfig& cfg, const EpochCallback& on_epoch = {});

/// Mean of the per-threat adversarial losses.
Expert train_avg(const Dataset& data, const ArchSpec& arch, std::span<const Threat> threats, const TrainConfig& cfg,
                 const EpochCallback& on_epoch = {});
Expert train_avg(const Dataset& data, const ArchSpec& arch, std::span<const AttackSpec> attacks,
                 const TrainConfig& cfg, const EpochCallback& on_epoch = {});

/// Adversarial examples from msd_perturb over the attacks.
Expert train_msd(const Dataset& data, const ArchSpec& arch, std::span<const AttackSpec> attacks,
                 const TrainConfig& cfg, const EpochCallback& on_epoch = {});

/// Training on whatever the threat produces (clean, pgd or weather).
Expert train_expert(const Dataset& data, const ArchSpec& arch, const Threat& threat, const TrainConfig& cfg,
                    const EpochCallback& on_epoch = {});

/// Attack threats with epsilon and step size multiplied by `s`; clean and
/// weather threats are returned unchanged.
Threat scale_radius(const Threat& threat, float s);
AttackSpec scale_radius(AttackSpec spec, float s);

std::vector<Threat> attack_threats(std::span<const AttackSpec> attacks);

/// Hash of everything a trainer's output depends on.
std::uint64_t training_fingerprint(const std::string& provenance, const ArchSpec& arch, const TrainConfig& cfg,
                                   std::uint64_t data_fingerprint);

}  // namespace more
