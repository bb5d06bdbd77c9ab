#include "more/ensemble.hpp"

#include <numeric>

#include "more/checkpoint.hpp"
#include "more/error.hpp"
#include "more/optim.hpp"
#include "more/rng.hpp"

namespace more {

Ensemble::Ensemble(std::vector<Expert> experts, Model gate) : experts_(std::move(experts)), gate_(std::move(gate)) {
  require(!experts_.empty(), Errc::invalid_params, "an ensemble needs at least one expert");
  const auto& first = experts_.front().model;
  for (const auto& e : experts_) {
    require(e.model.num_classes() == first.num_classes(), Errc::shape_mismatch, "experts disagree on class count");
    require(e.model.input_shape() == first.input_shape(), Errc::shape_mismatch, "experts disagree on input shape");
  }
  require(gate_.num_classes() == experts_.size(), Errc::shape_mismatch,
          "gate width " + std::to_string(gate_.num_classes()) + " != expert count " + std::to_string(experts_.size()));
  require(gate_.input_shape() == first.input_shape(), Errc::shape_mismatch, "gate input shape differs from experts");
}

Ensemble::Bound Ensemble::bind(Graph& graph, bool trainable) const {
  Bound b;
  for (const auto& e : experts_) b.experts.push_back(e.model.bind(graph, trainable ? Trainable::head : Trainable::none));
  b.gate = gate_.bind(graph, trainable ? Trainable::all : Trainable::none);
  return b;
}

Var Ensemble::gate_logits(Graph& graph, Var batch, const Bound& bound) const {
  return gate_.forward(graph, batch, bound.gate);
}

Var Ensemble::forward(Graph& graph, Var batch, const Bound& bound) const {
  std::vector<Var> outs;
  outs.reserve(experts_.size());
  for (std::size_t i = 0; i < experts_.size(); ++i)
    outs.push_back(experts_[i].model.forward(graph, batch, bound.experts[i]));
  return weighted_sum(outs, softmax(gate_logits(graph, batch, bound)));
}

Var Ensemble::logits(Graph& graph, Var batch) const { return forward(graph, batch, bind(graph, false)); }

std::vector<std::uint64_t> Ensemble::backbone_fingerprints() const {
  std::vector<std::uint64_t> out;
  for (const auto& e : experts_) out.push_back(e.model.backbone_fingerprint());
  return out;
}

Model build_gate(const ArchSpec& expert_arch, std::size_t m, std::uint64_t seed) {
  return build_classifier(expert_arch.with_classes(m), derive_seed(seed, 0x6a7e));
}

Ensemble assemble(std::vector<Expert> experts, std::uint64_t gate_seed) {
  require(!experts.empty(), Errc::invalid_params, "an ensemble needs at least one expert");
  Model gate = build_gate(experts.front().model.arch(), experts.size(), gate_seed);
  return Ensemble(std::move(experts), std::move(gate));
}

Tensor gate_weights(const Ensemble& ens, const Tensor& x) {
  return softmax(ens.gate().predict_logits(x));
}

Tensor more_forward(const Ensemble& ens, const Tensor& x) { return ens.predict_logits(x); }

std::vector<int> classify(const Ensemble& ens, const Tensor& x) { return argmax_rows(more_forward(ens, x)); }

std::vector<Threat> default_rotation(const AttackSpec& linf, const AttackSpec& l2, const PerturbSpec& fog_spec,
                                     const PerturbSpec& snow_spec) {
  return {Threat::attack("pgd-linf", linf), Threat::attack("pgd-l2", l2), Threat::weather("fog", fog_spec),
          Threat::weather("snow", snow_spec), Threat::clean()};
}

std::vector<std::string> rotation_schedule(std::span<const Threat> rotation, std::size_t batches) {
  require(!rotation.empty(), Errc::empty_rotation, "fine-tuning rotation is empty");
  std::vector<std::string> out;
  for (std::size_t b = 0; b < batches; ++b) out.push_back(rotation[b % rotation.size()].name);
  return out;
}

namespace {

double ensemble_loss_and_grads(const Ensemble& ens, const Tensor& x, std::span<const int> labels,
                               std::vector<Tensor>& grads) {
  Graph g;
  const auto bound = ens.bind(g, true);
  Var loss = cross_entropy(ens.forward(g, g.constant(x), bound), labels);
  std::vector<Var> wrt = bound.gate;
  for (const auto& e : bound.experts) wrt.insert(wrt.end(), e.end() - 2, e.end());
  grads = g.backward(loss, wrt);
  return loss.value().item();
}

std::vector<Tensor*> trainable_params(Ensemble& ens) {
  std::vector<Tensor*> out;
  for (auto& p : ens.gate().params()) out.push_back(&p.value);
  for (auto& e : ens.experts()) {
    auto params = e.model.params();
    for (std::size_t i = e.model.head_begin(); i < params.size(); ++i) out.push_back(&params[i].value);
  }
  return out;
}

}  // namespace

Ensemble more_finetune(Ensemble ens, const Dataset& data, std::span<const Threat> rotation, const TrainConfig& cfg,
                       const EpochCallback& on_epoch) {
  require(!rotation.empty(), Errc::empty_rotation, "fine-tuning rotation is empty");
  require(!data.empty(), Errc::empty_dataset, "fine-tuning set " + data.name + " is empty");
  cfg.validate();
  const auto frozen = ens.backbone_fingerprints();
  const Dataset probe = data.head(512);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  SgdState state;
  std::vector<Tensor> grads;
  std::uint64_t global_batch = 0;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng rng(derive_seed(cfg.seed, 0xf1e7, static_cast<std::uint64_t>(epoch)));
    rng.shuffle(std::span<std::size_t>(order));
    const float lr = cfg.lr_at(epoch);
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size, ++global_batch) {
      const std::span<const std::size_t> idx(order.data() + start, std::min(cfg.batch_size, order.size() - start));
      const Tensor x = data.images_at(idx);
      const std::vector<int> y = data.labels_at(idx);
      const Threat& threat = rotation[global_batch % rotation.size()];
      const Tensor x_in = apply_threat(threat, ens, x, y, idx, derive_seed(cfg.seed, global_batch, 0));
      const double loss = ensemble_loss_and_grads(ens, x_in, y, grads);
      require(std::isfinite(loss), Errc::non_finite, "fine-tuning loss became non-finite");
      const auto params = trainable_params(ens);
      sgd_step(params, grads, lr, cfg.momentum, state);
      loss_sum += loss;
      ++batches;
    }
    if (on_epoch) {
      const auto pred = classify(ens, probe.images);
      std::size_t correct = 0;
      for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == probe.labels[i];
      on_epoch(EpochRecord{epoch, lr, loss_sum / static_cast<double>(batches),
                           static_cast<double>(correct) / static_cast<double>(pred.size())});
    }
  }
  require(ens.backbone_fingerprints() == frozen, Errc::stage_failure, "a frozen backbone changed during fine-tuning");
  return ens;
}

double mixed_threat_loss(const Ensemble& ens, const Dataset& probe, std::span<const Threat> rotation,
                         std::uint64_t seed) {
  require(!rotation.empty(), Errc::empty_rotation, "rotation is empty");
  require(!probe.empty(), Errc::empty_dataset, "probe set is empty");
  double total = 0.0;
  std::size_t rows = 0;
  std::vector<std::size_t> idx;
  for (std::size_t t = 0; t < rotation.size(); ++t) {
    idx.clear();
    for (std::size_t i = t; i < probe.size(); i += rotation.size()) idx.push_back(i);
    if (idx.empty()) continue;
    const Tensor x = probe.images_at(idx);
    const auto y = probe.labels_at(idx);
    const Tensor x_in = apply_threat(rotation[t], ens, x, y, idx, derive_seed(seed, t));
    for (float l : cross_entropy_per_example(more_forward(ens, x_in), y)) total += l;
    rows += idx.size();
  }
  return total / static_cast<double>(rows);
}

void save_ensemble(const Ensemble& ens, const std::filesystem::path& dir, std::span<const Threat> rotation,
                   std::map<std::string, std::string> extra) {
  Checkpoint manifest;
  manifest.metadata = std::move(extra);
  manifest.metadata["kind"] = "ensemble";
  manifest.metadata["experts"] = std::to_string(ens.size());
  for (std::size_t i = 0; i < ens.size(); ++i) {
    const auto& e = ens.experts()[i];
    const std::string file = "expert" + std::to_string(i) + ".ckpt";
    save_model(e.model, dir / file,
               {{"provenance", e.provenance}, {"training_fingerprint", std::to_string(e.fingerprint)}});
    manifest.metadata["expert." + std::to_string(i) + ".path"] = file;
    manifest.metadata["expert." + std::to_string(i) + ".provenance"] = e.provenance;
    manifest.metadata["expert." + std::to_string(i) + ".backbone"] = std::to_string(e.model.backbone_fingerprint());
  }
  save_model(ens.gate(), dir / "gate.ckpt", {{"role", "gate"}});
  manifest.metadata["gate.path"] = "gate.ckpt";
  std::string rot;
  for (std::size_t i = 0; i < rotation.size(); ++i) rot += (i ? "," : "") + rotation[i].name;
  manifest.metadata["rotation"] = rot;
  save_checkpoint(manifest, dir / "ensemble.ckpt");
}

Ensemble load_ensemble(const std::filesystem::path& manifest_path) {
  const Checkpoint manifest = load_checkpoint(manifest_path);
  const auto& md = manifest.metadata;
  require(md.count("kind") && md.at("kind") == "ensemble", Errc::invalid_params,
          manifest_path.string() + " is not an ensemble manifest");
  const auto dir = manifest_path.parent_path();
  const std::size_t m = std::stoul(md.at("experts"));
  std::vector<Expert> experts;
  for (std::size_t i = 0; i < m; ++i) {
    const std::string key = "expert." + std::to_string(i);
    const Checkpoint ck = load_checkpoint(dir / md.at(key + ".path"));
    Expert e{model_from_checkpoint(ck), md.at(key + ".provenance"), 0};
    if (auto it = ck.metadata.find("training_fingerprint"); it != ck.metadata.end()) e.fingerprint = std::stoull(it->second);
    require(std::to_string(e.model.backbone_fingerprint()) == md.at(key + ".backbone"), Errc::hash_mismatch,
            "expert " + std::to_string(i) + " backbone differs from the manifest");
    experts.push_back(std::move(e));
  }
  return Ensemble(std::move(experts), load_model(dir / md.at("gate.path")));
}

}  // namespace more
