#include "more/training.hpp"

#include <cmath>
#include <numeric>
#include <sstream>

#include "more/error.hpp"
#include "more/optim.hpp"
#include "more/rng.hpp"

namespace more {

namespace {

constexpr std::size_t kProbeSize = 512;

double accuracy(const Classifier& model, const Tensor& x, std::span<const int> labels) {
  const auto pred = model.predict(x);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == labels[i];
  return pred.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(pred.size());
}

std::uint64_t threat_seed(const BatchContext& ctx, std::size_t threat_index) {
  return derive_seed(ctx.seed, ctx.global_batch, threat_index);
}

std::string join_threats(const char* kind, std::span<const Threat> threats) {
  std::string s = std::string(kind) + "(";
  for (std::size_t i = 0; i < threats.size(); ++i) s += (i ? "," : "") + threats[i].describe();
  return s + ")";
}

Expert finish(Model model, std::string provenance, const ArchSpec& arch, const TrainConfig& cfg,
              const Dataset& data) {
  const std::uint64_t fp = training_fingerprint(provenance, arch, cfg, data.fingerprint);
  return Expert{std::move(model), std::move(provenance), fp};
}

void require_threats(std::span<const Threat> threats) {
  require(!threats.empty(), Errc::invalid_params, "multi-threat training needs at least one threat");
}

}  // namespace

float TrainConfig::lr_at(int epoch) const {
  return static_cast<float>(static_cast<double>(lr) * std::pow(1.0 - static_cast<double>(lr_decay), epoch));
}

void TrainConfig::validate() const {
  require(epochs >= 1, Errc::invalid_params, "epochs must be >= 1");
  require(batch_size >= 1, Errc::invalid_params, "batch size must be >= 1");
  require(lr > 0.0f, Errc::invalid_params, "lr must be > 0");
  require(lr_decay >= 0.0f && lr_decay <= 1.0f, Errc::invalid_params, "lr_decay must lie in [0, 1]");
  require(momentum >= 0.0f && momentum < 1.0f, Errc::invalid_params, "momentum must lie in [0, 1)");
  require(warmup_epochs >= 0, Errc::invalid_params, "warmup_epochs must be >= 0");
}

std::string TrainConfig::describe() const {
  std::ostringstream os;
  os.precision(9);
  os << "epochs=" << epochs << ":batch=" << batch_size << ":lr=" << lr << ":decay=" << lr_decay
     << ":momentum=" << momentum << ":seed=" << seed;
  if (warmup_epochs > 0) os << ":warmup=" << warmup_epochs;
  return os.str();
}

std::string EpochRecord::to_json() const {
  std::ostringstream os;
  os.precision(9);
  os << "{\"epoch\":" << epoch << ",\"lr\":" << lr << ",\"loss\":" << loss << ",\"clean_acc\":" << clean_acc << "}";
  return os.str();
}

std::uint64_t training_fingerprint(const std::string& provenance, const ArchSpec& arch, const TrainConfig& cfg,
                                   std::uint64_t data_fingerprint) {
  Fnv1a h;
  h.update(provenance);
  h.update(arch.to_string());
  h.update(cfg.describe());
  h.update_u64(data_fingerprint);
  return h.digest();
}

double loss_and_grads(const Model& model, const Tensor& x, std::span<const int> labels, std::vector<Tensor>& grads) {
  Graph g;
  const std::vector<Var> params = model.bind(g, Trainable::all);
  Var loss = cross_entropy(model.forward(g, g.constant(x), params), labels);
  grads = g.backward(loss, params);
  return loss.value().item();
}

Model train_loop(Model model, const Dataset& data, const TrainConfig& cfg, const BatchObjective& objective,
                 const EpochCallback& on_epoch) {
  cfg.validate();
  require(!data.empty(), Errc::empty_dataset, "training set " + data.name + " is empty");
  const Dataset probe = data.head(kProbeSize);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  SgdState state;
  std::vector<Tensor> grads;
  std::vector<Tensor*> params;
  std::uint64_t global_batch = 0;
  const std::size_t batches_per_epoch = (data.size() + cfg.batch_size - 1) / cfg.batch_size;
  const std::uint64_t warmup_batches = static_cast<std::uint64_t>(cfg.warmup_epochs) * batches_per_epoch;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng rng(derive_seed(cfg.seed, 0x5affe, static_cast<std::uint64_t>(epoch)));
    rng.shuffle(std::span<std::size_t>(order));
    const float lr = cfg.lr_at(epoch);
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size, ++global_batch) {
      const std::span<const std::size_t> idx(order.data() + start, std::min(cfg.batch_size, order.size() - start));
      const Tensor x = data.images_at(idx);
      const std::vector<int> y = data.labels_at(idx);
      const float radius = global_batch < warmup_batches
                               ? static_cast<float>(static_cast<double>(global_batch + 1) /
                                                    static_cast<double>(warmup_batches))
                               : 1.0f;
      const double loss = objective(BatchContext{model, x, y, idx, global_batch, cfg.seed, radius}, grads);
      require(std::isfinite(loss), Errc::non_finite, "training loss became non-finite");
      params.clear();
      for (auto& p : model.params()) params.push_back(&p.value);
      sgd_step(params, grads, lr, cfg.momentum, state);
      loss_sum += loss;
      ++batches;
    }
    if (on_epoch) {
      EpochRecord rec{epoch, lr, loss_sum / static_cast<double>(batches), accuracy(model, probe.images, probe.labels)};
      on_epoch(rec);
    }
  }
  return model;
}

Expert train_clean(const Dataset& data, const ArchSpec& arch, const TrainConfig& cfg, const EpochCallback& on_epoch) {
  Model m = train_loop(build_classifier(arch, cfg.seed), data, cfg,
                       [](const BatchContext& ctx, std::vector<Tensor>& grads) {
                         return loss_and_grads(ctx.model, ctx.x, ctx.labels, grads);
                       },
                       on_epoch);
  return finish(std::move(m), "clean", arch, cfg, data);
}

Expert train_adversarial(const Dataset& data, const ArchSpec& arch, const AttackSpec& attack, const TrainConfig& cfg,
                         const EpochCallback& on_epoch) {
  attack.validate();
  Model m = train_loop(build_classifier(arch, cfg.seed), data, cfg,
                       [&attack](const BatchContext& ctx, std::vector<Tensor>& grads) {
                         AttackSpec spec = scale_radius(attack, ctx.radius_scale);
                         spec.seed = threat_seed(ctx, 0);
                         const Tensor x_adv = pgd(ctx.model, ctx.x, ctx.labels, spec);
                         return loss_and_grads(ctx.model, x_adv, ctx.labels, grads);
                       },
                       on_epoch);
  return finish(std::move(m), "adv(" + Threat::attack("", attack).describe() + ")", arch, cfg, data);
}

Expert train_weather(const Dataset& data, const ArchSpec& arch, const PerturbSpec& spec, const TrainConfig& cfg,
                     const EpochCallback& on_epoch) {
  spec.validate();
  require(!data.empty(), Errc::empty_dataset, "training set " + data.name + " is empty");
  Expert e = train_clean(weatherize_dataset(data, spec), arch, cfg, on_epoch);
  e.provenance = "weather(" + spec.describe() + ")";
  e.fingerprint = training_fingerprint(e.provenance, arch, cfg, data.fingerprint);
  return e;
}

Expert train_max(const Dataset& data, const ArchSpec& arch, std::span<const Threat> threats, const TrainConfig& cfg,
                 const EpochCallback& on_epoch) {
  require_threats(threats);
  Model m = train_loop(
      build_classifier(arch, cfg.seed), data, cfg,
      [threats](const BatchContext& ctx, std::vector<Tensor>& grads) {
        std::vector<Tensor> candidates;
        std::vector<std::vector<float>> losses;
        for (std::size_t t = 0; t < threats.size(); ++t) {
          candidates.push_back(apply_threat(scale_radius(threats[t], ctx.radius_scale), ctx.model, ctx.x, ctx.labels, ctx.indices, threat_seed(ctx, t)));
          losses.push_back(threats.size() > 1
                               ? cross_entropy_per_example(ctx.model.predict_logits(candidates.back()), ctx.labels)
                               : std::vector<float>(ctx.labels.size(), 0.0f));
        }
        const Tensor worst = gather_rows(candidates, worst_case_choice(losses));
        return loss_and_grads(ctx.model, worst, ctx.labels, grads);
      },
      on_epoch);
  return finish(std::move(m), join_threats("max", threats), arch, cfg, data);
}

Expert train_avg(const Dataset& data, const ArchSpec& arch, std::span<const Threat> threats, const TrainConfig& cfg,
                 const EpochCallback& on_epoch) {
  require_threats(threats);
  Model m = train_loop(
      build_classifier(arch, cfg.seed), data, cfg,
      [threats](const BatchContext& ctx, std::vector<Tensor>& grads) {
        // The candidates are all generated against the same parameters
        // before any gradient is taken.
        std::vector<Tensor> candidates;
        for (std::size_t t = 0; t < threats.size(); ++t)
          candidates.push_back(apply_threat(scale_radius(threats[t], ctx.radius_scale), ctx.model, ctx.x, ctx.labels, ctx.indices, threat_seed(ctx, t)));
        double loss = 0.0;
        std::vector<Tensor> part;
        for (std::size_t t = 0; t < candidates.size(); ++t) {
          loss += loss_and_grads(ctx.model, candidates[t], ctx.labels, t == 0 ? grads : part);
          if (t > 0)
            for (std::size_t p = 0; p < grads.size(); ++p) grads[p].add_(part[p]);
        }
        const float inv = 1.0f / static_cast<float>(candidates.size());
        for (auto& g : grads)
          for (float& v : g.data()) v *= inv;
        return loss / static_cast<double>(candidates.size());
      },
      on_epoch);
  return finish(std::move(m), join_threats("avg", threats), arch, cfg, data);
}

AttackSpec scale_radius(AttackSpec spec, float s) {
  if (s == 1.0f) return spec;
  spec.epsilon *= s;
  spec.step_size *= s;
  return spec;
}

Threat scale_radius(const Threat& threat, float s) {
  if (s == 1.0f || !threat.is_attack()) return threat;
  Threat out = threat;
  auto& a = std::get<AttackThreat>(out.kind);
  a.spec = scale_radius(a.spec, s);
  for (auto& u : a.union_specs) u = scale_radius(u, s);
  return out;
}

std::vector<Threat> attack_threats(std::span<const AttackSpec> attacks) {
  std::vector<Threat> out;
  for (const auto& a : attacks) out.push_back(Threat::attack("pgd-" + norm_name(a.norm), a));
  return out;
}

Expert train_max(const Dataset& data, const ArchSpec& arch, std::span<const AttackSpec> attacks,
                 const TrainConfig& cfg, const EpochCallback& on_epoch) {
  const auto threats = attack_threats(attacks);
  return train_max(data, arch, std::span<const Threat>(threats), cfg, on_epoch);
}

Expert train_avg(const Dataset& data, const ArchSpec& arch, std::span<const AttackSpec> attacks,
                 const TrainConfig& cfg, const EpochCallback& on_epoch) {
  const auto threats = attack_threats(attacks);
  return train_avg(data, arch, std::span<const Threat>(threats), cfg, on_epoch);
}

Expert train_msd(const Dataset& data, const ArchSpec& arch, std::span<const AttackSpec> attacks,
                 const TrainConfig& cfg, const EpochCallback& on_epoch) {
  require(!attacks.empty(), Errc::invalid_params, "msd training needs at least one attack");
  const std::vector<AttackSpec> specs(attacks.begin(), attacks.end());
  Model m = train_loop(build_classifier(arch, cfg.seed), data, cfg,
                       [specs](const BatchContext& ctx, std::vector<Tensor>& grads) {
                         std::vector<AttackSpec> seeded = specs;
                         for (auto& s : seeded) {
                           s = scale_radius(s, ctx.radius_scale);
                           s.seed = threat_seed(ctx, 0);
                         }
                         const Tensor x_adv = msd_perturb(ctx.model, ctx.x, ctx.labels, seeded);
                         return loss_and_grads(ctx.model, x_adv, ctx.labels, grads);
                       },
                       on_epoch);
  return finish(std::move(m), "msd(" + Threat::msd("", specs).describe() + ")", arch, cfg, data);
}

Expert train_expert(const Dataset& data, const ArchSpec& arch, const Threat& threat, const TrainConfig& cfg,
                    const EpochCallback& on_epoch) {
  if (threat.is_clean()) return train_clean(data, arch, cfg, on_epoch);
  if (threat.is_weather()) return train_weather(data, arch, std::get<PerturbSpec>(threat.kind), cfg, on_epoch);
  const auto& a = std::get<AttackThreat>(threat.kind);
  require(a.method == AttackMethod::pgd, Errc::invalid_params, "experts are trained with pgd");
  return train_adversarial(data, arch, a.spec, cfg, on_epoch);
}

}  // namespace more
