#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "more/dataset.hpp"
#include "more/model.hpp"
#include "more/threat.hpp"
#include "more/training.hpp"

namespace more {

/// Gate-weighted sum of expert logits: f(x) = Σ softmax(g(x))_i · E_i(x).
class Ensemble : public Classifier {
 public:
  Ensemble(std::vector<Expert> experts, Model gate);

  std::size_t size() const noexcept { return experts_.size(); }
  std::span<const Expert> experts() const noexcept { return experts_; }
  std::span<Expert> experts() noexcept { return experts_; }
  const Model& gate() const noexcept { return gate_; }
  Model& gate() noexcept { return gate_; }

  struct Bound {
    std::vector<std::vector<Var>> experts;
    std::vector<Var> gate;
  };
  /// Expert heads and the whole gate become variables when `trainable`.
  Bound bind(Graph& graph, bool trainable) const;
  Var gate_logits(Graph& graph, Var batch, const Bound& bound) const;
  Var forward(Graph& graph, Var batch, const Bound& bound) const;

  Var logits(Graph& graph, Var batch) const override;
  const Shape& input_shape() const override { return gate_.input_shape(); }
  std::size_t num_classes() const override { return experts_.front().model.num_classes(); }

  std::vector<std::uint64_t> backbone_fingerprints() const;

 private:
  std::vector<Expert> experts_;
  Model gate_;
};

/// Same architecture family as the experts with output width m.
Model build_gate(const ArchSpec& expert_arch, std::size_t m, std::uint64_t seed);

Ensemble assemble(std::vector<Expert> experts, std::uint64_t gate_seed);

/// softmax of the gate logits, B×m.
Tensor gate_weights(const Ensemble& ens, const Tensor& x);
/// Mixture logits, B×k.
Tensor more_forward(const Ensemble& ens, const Tensor& x);
/// argmax of more_forward per row; ties go to the lowest class index.
std::vector<int> classify(const Ensemble& ens, const Tensor& x);

/// The fixed cyclic rotation pgd-ℓ∞, pgd-ℓ2, fog, snow, clean.
std::vector<Threat> default_rotation(const AttackSpec& linf, const AttackSpec& l2, const PerturbSpec& fog_spec,
                                     const PerturbSpec& snow_spec);

/// Names of the threats used by the first `batches` fine-tuning batches.
std::vector<std::string> rotation_schedule(std::span<const Threat> rotation, std::size_t batches);

/// Fine-tunes the gate and the expert heads; batch b is perturbed by
/// rotation[b mod len], attacks running against the whole current ensemble.
Ensemble more_finetune(Ensemble ens, const Dataset& data, std::span<const Threat> rotation, const TrainConfig& cfg,
                       const EpochCallback& on_epoch = {});

/// Mean fine-tuning objective on a fixed batch, each rotation slot applied
/// to its share of the rows.
double mixed_threat_loss(const Ensemble& ens, const Dataset& probe, std::span<const Threat> rotation,
                         std::uint64_t seed);

/// Writes <dir>/expert<i>.ckpt, <dir>/gate.ckpt and the manifest
/// <dir>/ensemble.ckpt.
void save_ensemble(const Ensemble& ens, const std::filesystem::path& dir, std::span<const Threat> rotation = {},
                   std::map<std::string, std::string> extra = {});
Ensemble load_ensemble(const std::filesystem::path& manifest);

}  // namespace more
