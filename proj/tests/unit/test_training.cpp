#include <doctest.h>

#include <cmath>
#include <functional>

#include "more/error.hpp"
#include "more/training.hpp"
#include "support.hpp"

using namespace more;

namespace {

Errc error_code(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("expected an error");
  return Errc::io_error;
}

double accuracy(const Classifier& m, const Dataset& d) {
  const auto pred = m.predict(d.images);
  std::size_t ok = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) ok += pred[i] == d.labels[i];
  return static_cast<double>(ok) / static_cast<double>(pred.size());
}

bool same_params(const Model& a, const Model& b) {
  if (a.params().size() != b.params().size()) return false;
  for (std::size_t i = 0; i < a.params().size(); ++i)
    if (!a.params()[i].value.bit_equal(b.params()[i].value)) return false;
  return true;
}

ArchSpec blob_arch(std::size_t dim, std::vector<std::size_t> hidden = {}) {
  return ArchSpec::mlp({1, 1, dim}, std::move(hidden), 2);
}

TrainConfig small_cfg(int epochs, std::size_t batch = 20) {
  TrainConfig c;
  c.epochs = epochs;
  c.batch_size = batch;
  c.lr = 0.1f;
  c.seed = 3;
  return c;
}

}  // namespace

TEST_SUITE("expert_training") {
  TEST_CASE("clean training separates blobs within 200 steps") {
    const Dataset d = synth_blobs(200, 1.0f, 2, 1);
    std::vector<double> losses;
    const Expert e = train_clean(d, blob_arch(2), small_cfg(20), [&](const EpochRecord& r) { losses.push_back(r.loss); });
    CHECK(losses.size() == 20);
    CHECK(accuracy(e.model, d) >= 0.99);
    CHECK(losses.back() < losses.front());
    CHECK(e.provenance == "clean");
  }

  TEST_CASE("trainers are deterministic") {
    const Dataset d = synth_blobs(80, 1.0f, 4, 2);
    const AttackSpec atk{Norm::l2, 0.1f, 3, 0.05f, true, 0};
    const Expert a = train_adversarial(d, blob_arch(4, {6}), atk, small_cfg(2));
    const Expert b = train_adversarial(d, blob_arch(4, {6}), atk, small_cfg(2));
    CHECK(same_params(a.model, b.model));
    CHECK(a.fingerprint == b.fingerprint);
    TrainConfig other = small_cfg(2);
    other.seed = 4;
    CHECK_FALSE(same_params(a.model, train_adversarial(d, blob_arch(4, {6}), atk, other).model));
  }

  TEST_CASE("adversarial training on blobs with margin 4 eps is robust") {
    // Margin measured after the rescale into [0, 1].
    const float margin = 2.0f;
    const float eps = margin / blobs_scale(margin) / 4.0f;
    const Dataset train = synth_blobs(200, margin, 2, 5), test = synth_blobs(200, margin, 2, 6);
    const AttackSpec atk{Norm::l2, eps, 10, eps / 4.0f, true, 0};
    const Expert e = train_adversarial(train, blob_arch(2), atk, small_cfg(20));

    AttackSpec eval = atk;
    eval.seed = 99;
    const Tensor adv = pgd(e.model, test.images, test.labels, eval);
    std::size_t pgd_ok = 0;
    const auto pred = e.model.predict(adv);
    for (std::size_t i = 0; i < pred.size(); ++i) pgd_ok += pred[i] == test.labels[i];
    CHECK(pgd_ok >= 190);

    // Brute force: every point of a polar grid on the ε-circle and inside it.
    std::size_t grid_ok = 0;
    for (std::size_t i = 0; i < test.size(); ++i) {
      Tensor probe({1 + 8 * 64, 1, 1, 2});
      std::size_t k = 0;
      probe[k++] = test.images[2 * i];
      probe[k++] = test.images[2 * i + 1];
      for (int r = 1; r <= 8; ++r)
        for (int a = 0; a < 64; ++a) {
          const double rad = eps * r / 8.0, ang = 2.0 * M_PI * a / 64.0;
          probe[k++] = std::clamp(static_cast<float>(test.images[2 * i] + rad * std::cos(ang)), 0.0f, 1.0f);
          probe[k++] = std::clamp(static_cast<float>(test.images[2 * i + 1] + rad * std::sin(ang)), 0.0f, 1.0f);
        }
      bool robust = true;
      for (int p : e.model.predict(probe)) robust = robust && p == test.labels[i];
      grid_ok += robust;
    }
    CHECK(grid_ok >= 190);
  }

  TEST_CASE("a vanishing ball recovers clean training") {
    const Dataset d = synth_blobs(60, 1.0f, 3, 7);
    const Expert clean = train_clean(d, blob_arch(3), small_cfg(3));
    const Expert adv = train_adversarial(d, blob_arch(3), AttackSpec{Norm::linf, 1e-7f, 1, 1e-7f, false, 0}, small_cfg(3));
    for (std::size_t i = 0; i < clean.model.params().size(); ++i) {
      const Tensor& a = clean.model.params()[i].value;
      const Tensor& b = adv.model.params()[i].value;
      for (std::size_t j = 0; j < a.size(); ++j) CHECK(std::fabs(a[j] - b[j]) <= 1e-4f);
    }
  }

  TEST_CASE("fog with t = 0 is clean training") {
    const Dataset d = synth_blobs(60, 1.0f, 3, 8);
    const Expert clean = train_clean(d, blob_arch(3), small_cfg(2));
    const Expert fog = train_weather(d, blob_arch(3), PerturbSpec::fog(0.0f, 0.6f), small_cfg(2));
    CHECK(same_params(clean.model, fog.model));
    CHECK(fog.provenance != clean.provenance);
  }

  TEST_CASE("baselines reduce to train_adversarial on a single attack") {
    const Dataset d = synth_blobs(60, 1.0f, 4, 9);
    const ArchSpec arch = blob_arch(4, {5});
    for (Norm n : {Norm::l2, Norm::linf}) {
      const AttackSpec atk{n, n == Norm::l2 ? 0.3f : 0.05f, 3, n == Norm::l2 ? 0.1f : 0.02f, true, 0};
      const Model ref = train_adversarial(d, arch, atk, small_cfg(2)).model;
      const AttackSpec one[] = {atk};
      CHECK(same_params(ref, train_max(d, arch, std::span<const AttackSpec>(one), small_cfg(2)).model));
      CHECK(same_params(ref, train_avg(d, arch, std::span<const AttackSpec>(one), small_cfg(2)).model));
      CHECK(same_params(ref, train_msd(d, arch, std::span<const AttackSpec>(one), small_cfg(2)).model));
      const Threat t[] = {Threat::attack("a", atk)};
      CHECK(same_params(ref, train_max(d, arch, std::span<const Threat>(t), small_cfg(2)).model));
    }
  }

  TEST_CASE("baselines also agree with warm-up radii") {
    const Dataset d = synth_blobs(60, 1.0f, 4, 10);
    const ArchSpec arch = blob_arch(4, {5});
    TrainConfig cfg = small_cfg(3);
    cfg.warmup_epochs = 2;
    const AttackSpec atk{Norm::linf, 0.05f, 3, 0.02f, true, 0};
    const Model ref = train_adversarial(d, arch, atk, cfg).model;
    const AttackSpec one[] = {atk};
    CHECK(same_params(ref, train_max(d, arch, std::span<const AttackSpec>(one), cfg).model));
    CHECK(same_params(ref, train_avg(d, arch, std::span<const AttackSpec>(one), cfg).model));
    CHECK(same_params(ref, train_msd(d, arch, std::span<const AttackSpec>(one), cfg).model));
    CHECK_FALSE(same_params(ref, train_adversarial(d, arch, atk, small_cfg(3)).model));
    CHECK(cfg.describe() != small_cfg(3).describe());
  }

  TEST_CASE("radius scaling touches attacks only") {
    const AttackSpec atk{Norm::l2, 1.0f, 5, 0.2f, true, 7};
    const AttackSpec half = scale_radius(atk, 0.5f);
    CHECK(half.epsilon == 0.5f);
    CHECK(half.step_size == doctest::Approx(0.1f));
    CHECK(half.steps == 5);
    const Threat fog = scale_radius(Threat::weather("fog", PerturbSpec::fog(0.15f, 0.6f)), 0.5f);
    CHECK(std::get<PerturbSpec>(fog.kind).t == doctest::Approx(0.15f));
    const Threat m = scale_radius(Threat::msd("m", {atk, AttackSpec::preset_linf()}), 0.5f);
    CHECK(std::get<AttackThreat>(m.kind).union_specs[1].epsilon == doctest::Approx(4.0f / 255.0f));
  }

  TEST_CASE("AVG of identical deterministic attacks equals a single attack") {
    const Dataset d = synth_blobs(60, 1.0f, 4, 11);
    const ArchSpec arch = blob_arch(4, {5});
    const AttackSpec atk{Norm::l2, 0.3f, 3, 0.1f, false, 0};
    const AttackSpec twice[] = {atk, atk};
    const Model ref = train_adversarial(d, arch, atk, small_cfg(2)).model;
    CHECK(same_params(ref, train_avg(d, arch, std::span<const AttackSpec>(twice), small_cfg(2)).model));
    CHECK(same_params(ref, train_max(d, arch, std::span<const AttackSpec>(twice), small_cfg(2)).model));
  }

  TEST_CASE("mean loss gradient is the mean of per-batch gradients") {
    Rng rng(12);
    const Model m = build_classifier(blob_arch(4, {6}), 1);
    const Tensor a = more::test::random_tensor({5, 1, 1, 4}, rng, 0.0f, 1.0f);
    const Tensor b = more::test::random_tensor({5, 1, 1, 4}, rng, 0.0f, 1.0f);
    const std::vector<int> y = {0, 1, 1, 0, 1};
    std::vector<Tensor> ga, gb, gab;
    const double la = loss_and_grads(m, a, y, ga), lb = loss_and_grads(m, b, y, gb);
    Tensor ab({10, 1, 1, 4});
    std::copy(a.data().begin(), a.data().end(), ab.data().begin());
    std::copy(b.data().begin(), b.data().end(), ab.data().begin() + 20);
    std::vector<int> yy = y;
    yy.insert(yy.end(), y.begin(), y.end());
    const double lab = loss_and_grads(m, ab, yy, gab);
    CHECK(lab == doctest::Approx(0.5 * (la + lb)).epsilon(1e-6));
    for (std::size_t p = 0; p < ga.size(); ++p)
      for (std::size_t i = 0; i < ga[p].size(); ++i)
        CHECK(gab[p][i] == doctest::Approx(0.5 * (ga[p][i] + gb[p][i])).epsilon(1e-5).scale(1e-6));
  }

  TEST_CASE("multi-threat baselines accept weather threats and stay finite") {
    const Dataset d = Dataset::make(synth_blobs(40, 1.0f, 16, 13).images.reshaped({40, 1, 4, 4}),
                                    synth_blobs(40, 1.0f, 16, 13).labels, "blobs4", 2);
    const ArchSpec arch = ArchSpec::mlp({1, 4, 4}, {6}, 2);
    const std::vector<Threat> threats = {Threat::attack("l2", AttackSpec{Norm::l2, 0.5f, 3, 0.2f, true, 0}),
                                         Threat::attack("linf", AttackSpec{Norm::linf, 0.1f, 3, 0.04f, true, 0}),
                                         Threat::weather("fog", PerturbSpec::fog(0.15f, 0.6f)),
                                         Threat::weather("snow", PerturbSpec::snow(2.5f, 1))};
    std::vector<double> seen;
    const auto record = [&](const EpochRecord& r) { seen.push_back(r.loss); };
    const Expert mx = train_max(d, arch, std::span<const Threat>(threats), small_cfg(2, 8), record);
    const Expert av = train_avg(d, arch, std::span<const Threat>(threats), small_cfg(2, 8), record);
    const AttackSpec pair[] = {std::get<AttackThreat>(threats[0].kind).spec, std::get<AttackThreat>(threats[1].kind).spec};
    const Expert ms = train_msd(d, arch, pair, small_cfg(2, 8), record);
    CHECK(seen.size() == 6);
    for (double l : seen) CHECK(std::isfinite(l));
    CHECK(mx.provenance.rfind("max(", 0) == 0);
    CHECK(av.provenance.rfind("avg(", 0) == 0);
    CHECK(ms.provenance.rfind("msd(", 0) == 0);
    CHECK(mx.fingerprint != av.fingerprint);
  }

  TEST_CASE("lr schedule is multiplicative and non-increasing") {
    TrainConfig c;
    CHECK(c.lr_at(0) == doctest::Approx(0.1f));
    CHECK(c.lr_at(1) == doctest::Approx(0.095f));
    CHECK(c.lr_at(2) == doctest::Approx(0.09025f));
    for (int e = 1; e < 30; ++e) CHECK(c.lr_at(e) <= c.lr_at(e - 1));
    c.lr_decay = 0.0f;
    CHECK(c.lr_at(10) == c.lr_at(0));
  }

  TEST_CASE("configuration and data errors") {
    TrainConfig c;
    c.epochs = 0;
    CHECK(error_code([&] { c.validate(); }) == Errc::invalid_params);
    c = TrainConfig{};
    c.lr = 0.0f;
    CHECK(error_code([&] { c.validate(); }) == Errc::invalid_params);
    c = TrainConfig{};
    c.lr_decay = 1.5f;
    CHECK(error_code([&] { c.validate(); }) == Errc::invalid_params);

    const Dataset empty = Dataset::make(Tensor({0, 1, 1, 2}), {}, "empty", 2);
    const ArchSpec arch = blob_arch(2);
    const TrainConfig ok = small_cfg(1);
    CHECK(error_code([&] { train_clean(empty, arch, ok); }) == Errc::empty_dataset);
    CHECK(error_code([&] { train_adversarial(empty, arch, AttackSpec::preset_l2(), ok); }) == Errc::empty_dataset);
    CHECK(error_code([&] { train_weather(empty, arch, PerturbSpec::fog(0.1f, 0.5f), ok); }) == Errc::empty_dataset);
    const AttackSpec one[] = {AttackSpec::preset_l2()};
    CHECK(error_code([&] { train_max(empty, arch, std::span<const AttackSpec>(one), ok); }) == Errc::empty_dataset);
    CHECK(error_code([&] { train_avg(empty, arch, std::span<const AttackSpec>(one), ok); }) == Errc::empty_dataset);
    CHECK(error_code([&] { train_msd(empty, arch, std::span<const AttackSpec>(one), ok); }) == Errc::empty_dataset);
  }

  TEST_CASE("training curve records serialize as JSON lines") {
    EpochRecord r{2, 0.5f, 1.25, 0.75};
    CHECK(r.to_json() == R"({"epoch":2,"lr":0.5,"loss":1.25,"clean_acc":0.75})");
  }
}
