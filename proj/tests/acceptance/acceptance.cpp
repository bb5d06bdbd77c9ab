// Acceptance suite: one PASS/FAIL line per criterion. Exit status is the
// number of failed criteria (0 when everything passes).

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "more/attacks.hpp"
#include "more/checkpoint.hpp"
#include "more/dataset.hpp"
#include "more/ensemble.hpp"
#include "more/error.hpp"
#include "more/experiment.hpp"
#include "more/gradcheck.hpp"
#include "more/graph.hpp"
#include "more/training.hpp"
#include "more/weather.hpp"
#include "support.hpp"

using namespace more;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;
};

class Checker {
 public:
  void expect(bool ok, const std::string& what) {
    if (!ok && first_failure_.empty()) first_failure_ = what;
    pass_ = pass_ && ok;
  }
  Outcome done(std::string detail) {
    if (!pass_) detail += "; first failure: " + first_failure_;
    return {pass_, detail};
  }

 private:
  bool pass_ = true;
  std::string first_failure_;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

const fs::path kSource = MORE_SOURCE_DIR;
const fs::path kWork = MORE_ACCEPTANCE_WORK;

// ---- 1 ---------------------------------------------------------------------

Outcome gradient_correctness() {
  const auto t0 = std::chrono::steady_clock::now();
  Checker c;
  double worst = 0.0;
  int instances = 0;
  for (std::uint64_t seed = 0; instances < 20; ++seed) {
    const bool cnn = instances % 2 == 1;
    const ArchSpec arch = cnn ? ArchSpec::cnn({1, 6, 6}, {ConvStage{2}}, {5}, 3) : ArchSpec::mlp({1, 2, 3}, {7, 5}, 3);
    const Model m = build_classifier(arch, derive_seed(seed, 1));
    Rng rng(derive_seed(seed, 2));
    const Tensor x = cnn ? more::test::random_tensor({3, 1, 6, 6}, rng, 0.0f, 1.0f)
                         : more::test::random_tensor({3, 1, 2, 3}, rng, -1.0f, 1.0f);
    double margin = 0.0;
    more::test::ref_model_logits(m, x, &margin);
    if (margin < 1e-2) continue;  // too close to a ReLU or pooling kink for central differences
    ++instances;
    const std::vector<int> y = {static_cast<int>(rng.below(3)), static_cast<int>(rng.below(3)),
                                static_cast<int>(rng.below(3))};
    Graph g;
    const auto bound = m.bind(g, Trainable::all);
    const auto grads = g.backward(cross_entropy(m.forward(g, g.constant(x), bound), y), bound);
    for (std::size_t i = 0; i < bound.size(); ++i) {
      const ScalarFn f = [&](const Tensor& pi) {
        Model probe = m;
        probe.params()[i].value = pi;
        return more::test::ref_cross_entropy(more::test::ref_model_logits(probe, x), 3, y);
      };
      const double err = max_relative_error(grads[i], finite_diff_gradient(f, m.params()[i].value, 1e-3f));
      worst = std::max(worst, err);
      c.expect(err <= 1e-3, "instance " + std::to_string(instances) + " param " + m.params()[i].name);
    }
  }
  const double dt = seconds_since(t0);
  c.expect(dt < 30.0, "runtime");
  return c.done("20 instances (10 MLP, 10 CNN), max rel err " + fmt("%.2e", worst) + ", " + fmt("%.1f s", dt));
}

// ---- 2 ---------------------------------------------------------------------

Outcome attack_contracts() {
  const auto t0 = std::chrono::steady_clock::now();
  Checker c;
  Rng rng(2024);
  int invocations = 0;
  double worst_excess = -1.0;
  const Model mlp = build_classifier(ArchSpec::mlp({1, 4, 4}, {12}, 4), 3);
  const Model cnn = build_classifier(ArchSpec::cnn({1, 8, 8}, {ConvStage{3}}, {}, 4), 4);
  auto check = [&](const Tensor& x_adv, const Tensor& x, Norm norm, float eps, const char* what) {
    ++invocations;
    for (double n : perturbation_norms(x_adv, x, norm)) {
      worst_excess = std::max(worst_excess, n - eps);
      c.expect(n <= eps + 1e-5, std::string(what) + " budget");
    }
    for (float v : x_adv.data()) c.expect(v >= 0.0f && v <= 1.0f, std::string(what) + " pixel range");
  };
  int pgd_fgsm = 0, idem = 0;
  while (invocations < 1000) {
    const Model& m = invocations % 2 ? cnn : mlp;
    const Shape& in = m.input_shape();
    Shape batch = {3};
    batch.insert(batch.end(), in.begin(), in.end());
    const Tensor x = more::test::random_tensor(batch, rng, 0.0f, 1.0f);
    std::vector<int> y(3);
    for (int& v : y) v = static_cast<int>(rng.below(4));
    const Norm norm = rng.below(2) ? Norm::l2 : Norm::linf;
    const float eps = norm == Norm::l2 ? rng.uniform(0.1f, 2.0f) : rng.uniform(0.01f, 0.3f);
    AttackSpec spec{norm, eps, static_cast<int>(1 + rng.below(6)), eps / 3.0f, rng.below(2) == 1, rng.next_u64()};
    check(pgd(m, x, y, spec), x, norm, eps, "pgd");
    if (norm == Norm::linf) {
      const Tensor f = fgsm(m, x, y, eps);
      check(f, x, norm, eps, "fgsm");
      const Tensor one = pgd(m, x, y, AttackSpec{Norm::linf, eps, 1, eps, false, 0});
      c.expect(one.bit_equal(f), "pgd(1, eps, linf) == fgsm");
      ++pgd_fgsm;
    }
    check(random_search_attack(m, x, y, spec, 10), x, norm, eps, "random search");
    AttackSpec other = spec;
    other.norm = norm == Norm::l2 ? Norm::linf : Norm::l2;
    other.epsilon = other.norm == Norm::l2 ? 1.0f : 0.1f;
    other.step_size = other.epsilon / 3.0f;
    const AttackSpec pair[] = {spec, other};
    const Tensor u = msd_perturb(m, x, y, pair);
    ++invocations;
    const auto a = perturbation_norms(u, x, spec.norm), b = perturbation_norms(u, x, other.norm);
    for (std::size_t i = 0; i < a.size(); ++i)
      c.expect(a[i] <= spec.epsilon + 1e-5 || b[i] <= other.epsilon + 1e-5, "msd budget");
    for (float v : u.data()) c.expect(v >= 0.0f && v <= 1.0f, "msd pixel range");

    const Tensor d = more::test::random_tensor({3, 16}, rng, -2.0f, 2.0f);
    const Tensor p = project(d, norm, eps);
    c.expect(project(p, norm, eps).bit_equal(p), "project idempotent");
    ++idem;
  }
  const double dt = seconds_since(t0);
  c.expect(dt < 60.0, "runtime");
  return c.done(std::to_string(invocations) + " invocations, max norm excess " + fmt("%.2e", worst_excess) + ", " +
                std::to_string(pgd_fgsm) + " pgd/fgsm and " + std::to_string(idem) + " projection checks, " +
                fmt("%.1f s", dt));
}

// ---- 3 to 8: desk pipeline ---------------------------------------------------

struct Desk {
  EvalReport report;
  double train_seconds = 0.0;
  double eval_seconds = 0.0;
  double four_worker_seconds = 0.0;
  std::optional<Ensemble> ensemble;
  std::optional<Dataset> test;
  std::string error;
};

// Makespan of greedy in-order assignment to the earliest free worker.
double list_schedule(const std::vector<double>& jobs, std::size_t workers) {
  std::vector<double> busy(workers, 0.0);
  for (double j : jobs) *std::min_element(busy.begin(), busy.end()) += j;
  return *std::max_element(busy.begin(), busy.end());
}

Desk run_desk() {
  Desk d;
  try {
    const std::vector<std::string> ov = {"output.dir=\"" + (kWork / "desk").string() + "\""};
    Experiment exp(load_config(kSource / "configs" / "desk.toml", ov), &std::cerr);
    const RunResult r = exp.run();
    d.report = r.report;
    d.ensemble = exp.finetuned();
    d.test = exp.test_data();
    // Recorded per-stage and per-cell times, replayed on four workers.
    std::vector<double> parallel_train, eval_cells;
    double serial_train = 0.0;
    for (const auto& [file, skip_header] : {std::pair{"stage_timings.csv", false}, std::pair{"eval_timings.csv", true}}) {
      std::ifstream t(kWork / "desk" / "logs" / file);
      std::string line;
      if (skip_header) std::getline(t, line);
      while (std::getline(t, line)) {
        const auto comma = line.rfind(',');
        if (comma == std::string::npos) continue;
        const double sec = std::stod(line.substr(comma + 1));
        if (skip_header) {
          eval_cells.push_back(sec);
          d.eval_seconds += sec;
        } else {
          d.train_seconds += sec;
          (line.rfind("finetune,", 0) == 0 ? serial_train : parallel_train.emplace_back()) += sec;
        }
      }
    }
    std::sort(eval_cells.rbegin(), eval_cells.rend());
    d.four_worker_seconds = list_schedule(parallel_train, 4) + serial_train + list_schedule(eval_cells, 4);
  } catch (const std::exception& e) {
    d.error = e.what();
  }
  return d;
}

double acc(const Desk& d, const std::string& model, const std::string& threat) {
  return d.report.accuracy(model, threat);
}

const std::vector<std::string> kFive = {"clean", "pgd-l2", "pgd-linf", "fog", "snow"};
const std::vector<std::string> kExperts = {"l2", "linf", "fog", "snow"};
const std::map<std::string, std::string> kOwnThreat = {
    {"l2", "pgd-l2"}, {"linf", "pgd-linf"}, {"fog", "fog"}, {"snow", "snow"}};

Outcome undefended_collapse(const Desk& d) {
  Checker c;
  const double clean = acc(d, "clean", "clean"), adv = acc(d, "clean", "pgd-linf");
  c.expect(clean >= 95.0, "clean accuracy >= 95");
  c.expect(adv <= 10.0, "pgd-linf accuracy <= 10");
  return c.done("clean model: clean " + fmt("%.2f", clean) + ", pgd-linf " + fmt("%.2f", adv));
}

Outcome expert_gap(const Desk& d) {
  Checker c;
  const double robust = acc(d, "linf", "pgd-linf"), base = acc(d, "clean", "pgd-linf"), clean = acc(d, "linf", "clean");
  c.expect(robust - base >= 30.0, "gap >= 30 points");
  c.expect(clean >= 88.0, "linf expert clean accuracy >= 88");
  return c.done("linf expert pgd-linf " + fmt("%.2f", robust) + " vs clean model " + fmt("%.2f", base) +
                ", linf expert clean " + fmt("%.2f", clean));
}

Outcome diagonal_dominance(const Desk& d) {
  Checker c;
  std::ostringstream os;
  for (const auto& e : kExperts) {
    const std::string& own = kOwnThreat.at(e);
    const double mine = acc(d, e, own);
    for (const auto& o : kExperts)
      if (o != e) c.expect(mine >= acc(d, o, own) - 2.0, e + " on " + own + " vs " + o);
    double worst_drop = 0.0;
    std::string where;
    for (const auto& [other, t] : kOwnThreat) {
      if (other == e) continue;
      const double drop = acc(d, e, "clean") - acc(d, e, t);
      if (drop > worst_drop) worst_drop = drop, where = t;
    }
    c.expect(worst_drop >= 20.0, e + " loses >= 20 points on a foreign threat");
    os << e << ": own " << fmt("%.2f", mine) << ", largest foreign drop " << fmt("%.2f", worst_drop) << " (" << where
       << "); ";
  }
  return c.done(os.str());
}

double mean5(const Desk& d, const std::string& model) { return d.report.mean_accuracy(model, kFive); }

Outcome more_dominance(const Desk& d) {
  Checker c;
  const double m = mean5(d, "more");
  std::ostringstream os;
  os << "more mean " << fmt("%.2f", m);
  for (const auto& e : kExperts) {
    const double em = mean5(d, e);
    c.expect(m >= em + 5.0, "more vs " + e);
    os << ", " << e << " " << fmt("%.2f", em);
  }
  return c.done(os.str());
}

bool same_params(const Model& a, const Model& b) {
  if (a.params().size() != b.params().size()) return false;
  for (std::size_t i = 0; i < a.params().size(); ++i)
    if (!a.params()[i].value.bit_equal(b.params()[i].value)) return false;
  return true;
}

Outcome baseline_comparison(const Desk& d) {
  Checker c;
  const double m = mean5(d, "more"), avg = mean5(d, "avg"), mx = mean5(d, "max");
  c.expect(m >= avg - 1.0, "more mean >= avg mean - 1");

  const Dataset data = load_mnist("train", 256);
  const ArchSpec arch = ArchSpec::cnn(data.example_shape(), {ConvStage{4}}, {}, data.num_classes);
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 64;
  cfg.lr = 0.05f;
  cfg.seed = 9;
  cfg.warmup_epochs = 1;
  int reductions = 0;
  for (const AttackSpec& atk : {AttackSpec{Norm::linf, 0.2f, 3, 0.07f, true, 1}, AttackSpec{Norm::l2, 1.5f, 3, 0.5f, true, 2}}) {
    const Model ref = train_adversarial(data, arch, atk, cfg).model;
    const AttackSpec one[] = {atk};
    const Threat t[] = {Threat::attack("single", atk)};
    c.expect(same_params(ref, train_max(data, arch, std::span<const AttackSpec>(one), cfg).model), "max reduction");
    c.expect(same_params(ref, train_avg(data, arch, std::span<const AttackSpec>(one), cfg).model), "avg reduction");
    c.expect(same_params(ref, train_max(data, arch, std::span<const Threat>(t), cfg).model), "max(threat) reduction");
    c.expect(same_params(ref, train_avg(data, arch, std::span<const Threat>(t), cfg).model), "avg(threat) reduction");
    reductions += 4;
  }
  return c.done("more mean " + fmt("%.2f", m) + ", avg " + fmt("%.2f", avg) + ", max " + fmt("%.2f", mx) +
                (m > avg ? " (more > avg)" : " (more <= avg)") + "; " + std::to_string(reductions) +
                " singleton reductions bit-exact");
}

Outcome adaptivity(const Desk& d) {
  Checker c;
  const double adaptive = acc(d, "more", "pgd-linf"), transfer = acc(d, "more", "pgd-linf-transfer");
  c.expect(adaptive <= transfer, "adaptive <= transfer");

  // d/dx of Σ w(x)·c for a fixed random c: the gate's own input gradient.
  const Ensemble& ens = *d.ensemble;
  const Dataset& test = *d.test;
  std::size_t nonzero = 0;
  Rng rng(8);
  for (std::size_t start = 0; start < test.size(); start += 250) {
    std::vector<std::size_t> idx(std::min<std::size_t>(250, test.size() - start));
    std::iota(idx.begin(), idx.end(), start);
    Graph g;
    const auto bound = ens.bind(g, false);
    const Var x = g.variable(test.images_at(idx));
    const Var w = softmax(ens.gate_logits(g, x, bound));
    const Var coef = g.constant(more::test::random_tensor({idx.size(), ens.size()}, rng, -1.0f, 1.0f));
    const Var probe[] = {x};
    const Tensor grad = g.backward(sum(mul(w, coef)), probe)[0];
    const std::size_t per = grad.size() / idx.size();
    for (std::size_t b = 0; b < idx.size(); ++b) {
      bool any = false;
      for (std::size_t i = 0; i < per && !any; ++i) any = grad[b * per + i] != 0.0f;
      nonzero += any;
    }
  }
  const double frac = static_cast<double>(nonzero) / static_cast<double>(test.size());
  c.expect(frac >= 0.99, "gate input gradient nonzero on >= 99%");
  return c.done("more pgd-linf adaptive " + fmt("%.2f", adaptive) + " vs transfer from linf expert " +
                fmt("%.2f", transfer) + "; gate gradient nonzero on " + fmt("%.2f%%", 100.0 * frac) + " of " +
                std::to_string(test.size()) + " inputs");
}

// ---- 9 ---------------------------------------------------------------------

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Every file except wall-clock timing logs, keyed by relative path.
std::map<std::string, std::string> run_files(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    const std::string name = e.path().filename().string();
    if (name.size() > 12 && name.compare(name.size() - 12, 12, "_timings.csv") == 0) continue;
    out[fs::relative(e.path(), dir).string()] = slurp(e.path());
  }
  return out;
}

std::uint32_t be32(const std::string& bytes, std::size_t at) {
  std::uint32_t v = 0;
  for (std::size_t i = 0; i < 4; ++i) v = (v << 8) | static_cast<unsigned char>(bytes[at + i]);
  return v;
}

Outcome determinism() {
  Checker c;
  std::ostringstream os;
  struct Rerun {
    std::string name;
    fs::path config;
    std::vector<std::string> overrides;
  };
  const std::vector<Rerun> reruns = {
      {"blobs", kSource / "tests" / "data" / "blobs.toml", {}},
      {"mnist-mini", kSource / "configs" / "desk.toml",
       {"data.train_limit=256", "data.test_limit=64", "train.epochs=1", "train.warmup_epochs=0", "more.epochs=1",
        "threats.pgd-linf.steps=3", "threats.pgd-l2.steps=3", "threats.train-linf.steps=2",
        "threats.train-l2.steps=2", "threats.rs-linf.queries=5", "threats.pgd-linf-transfer.steps=3"}},
  };
  for (const auto& r : reruns) {
    std::map<std::string, std::string> files[2];
    for (int k = 0; k < 2; ++k) {
      const fs::path out = kWork / "rerun" / (r.name + (k ? "-b" : "-a"));
      fs::remove_all(out);
      std::vector<std::string> ov = r.overrides;
      ov.push_back("output.dir=\"" + out.string() + "\"");
      Experiment(load_config(r.config, ov)).run();
      files[k] = run_files(out);
    }
    c.expect(!files[0].empty(), r.name + " wrote files");
    c.expect(files[0].size() == files[1].size(), r.name + " file sets");
    for (const auto& [path, bytes] : files[0]) {
      const auto it = files[1].find(path);
      c.expect(it != files[1].end() && it->second == bytes, r.name + " " + path + " identical");
    }
    os << r.name << ": " << files[0].size() << " files identical; ";

    // Checkpoint round trips re-encode to the same bytes.
    for (const auto& [path, bytes] : files[0]) {
      if (path.size() < 5 || path.compare(path.size() - 5, 5, ".ckpt") != 0) continue;
      const std::vector<std::uint8_t> raw(bytes.begin(), bytes.end());
      c.expect(encode_checkpoint(decode_checkpoint(raw)) == raw, r.name + " " + path + " round trip");
    }
  }

  std::size_t loaded = 0;
  for (const std::string prefix : {"train", "t10k"}) {
    const fs::path dir = data_root() / "mnist";
    const fs::path images = dir / (prefix + "-images-idx3-ubyte"), labels = dir / (prefix + "-labels-idx1-ubyte");
    const std::string ib = slurp(images), lb = slurp(labels);
    const Dataset ds = load_idx(images, labels);
    c.expect(ds.size() == be32(ib, 4) && ds.size() == be32(lb, 4), prefix + " idx counts");
    c.expect(ds.example_shape() == Shape{1, be32(ib, 8), be32(ib, 12)}, prefix + " idx shape");
    c.expect(ib.size() == 16 + std::size_t{be32(ib, 4)} * be32(ib, 8) * be32(ib, 12), prefix + " idx size");
    loaded += ds.size();
  }
  os << "IDX counts match headers (" << loaded << " examples)";
  return c.done(os.str());
}

// ---- 10 --------------------------------------------------------------------

Outcome weather() {
  Checker c;
  std::size_t pixels = 0;
  for (const std::string split : {"train", "test"}) {
    const Dataset ds = load_mnist(split);
    const Tensor& x = ds.images;
    pixels += x.size();
    c.expect(fog(x, 0.0f, 0.6f).bit_equal(x), split + " fog identity at t=0");
    for (float light : {0.6f, 0.8f}) {
      Tensor prev = x;
      for (float t : {0.05f, 0.1f, 0.15f}) {
        const Tensor out = fog(x, t, light);
        bool bound = true, range = true, mono = true;
        for (std::size_t i = 0; i < out.size(); ++i) {
          bound = bound && out[i] >= std::min(x[i], light) && out[i] <= std::max(x[i], light);
          range = range && out[i] >= 0.0f && out[i] <= 1.0f;
          mono = mono && std::fabs(out[i] - light) <= std::fabs(prev[i] - light);
        }
        c.expect(bound, split + " fog convex bound");
        c.expect(range, split + " fog range");
        c.expect(mono, split + " fog monotone in t");
        prev = out;
      }
    }
    std::vector<std::size_t> idx(ds.size());
    std::iota(idx.begin(), idx.end(), 0);
    c.expect(apply_weather(x, PerturbSpec::snow(2.5f, 3, 0.0f), idx).bit_equal(x), split + " snow identity");
    const Tensor lo = apply_weather(x, PerturbSpec::snow(2.0f, 3), idx);
    const Tensor hi = apply_weather(x, PerturbSpec::snow(2.5f, 3), idx);
    bool range = true, mono = true;
    double sum_lo = 0.0, sum_hi = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      range = range && lo[i] >= 0.0f && lo[i] <= 1.0f && hi[i] >= 0.0f && hi[i] <= 1.0f;
      mono = mono && hi[i] >= lo[i];
      sum_lo += lo[i];
      sum_hi += hi[i];
    }
    c.expect(range, split + " snow range");
    c.expect(mono && sum_hi > sum_lo, split + " snow monotone in darkness");
  }
  return c.done(std::to_string(pixels) + " MNIST pixels; fog t in {0.05, 0.1, 0.15}, snow darkness in {2.0, 2.5}");
}

}  // namespace

int main() {
  int failed = 0;
  auto print = [&](int id, const std::string& title, const std::function<Outcome()>& fn) {
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    failed += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << id << " " << title << ": " << o.detail << std::endl;
  };

  print(1, "gradient correctness", gradient_correctness);
  print(2, "attack contracts", attack_contracts);

  const auto t0 = std::chrono::steady_clock::now();
  const Desk desk = run_desk();
  std::cout << "info desk pipeline: " << fmt("%.0f s", seconds_since(t0)) << " wall this run on "
            << std::thread::hardware_concurrency() << " core(s); recorded single-thread work "
            << fmt("%.0f s", desk.train_seconds) << " training + " << fmt("%.0f s", desk.eval_seconds)
            << " evaluation; replayed on 4 workers " << fmt("%.0f s", desk.four_worker_seconds) << std::endl;
  auto with_desk = [&](Outcome (*fn)(const Desk&)) {
    return [&desk, fn]() -> Outcome {
      if (!desk.error.empty()) return {false, "desk pipeline failed: " + desk.error};
      return fn(desk);
    };
  };
  print(3, "undefended collapse", with_desk(undefended_collapse));
  print(4, "expert robustness gap", with_desk(expert_gap));
  print(5, "diagonal dominance", with_desk(diagonal_dominance));
  print(6, "ensemble dominance", with_desk(more_dominance));
  print(7, "baseline comparison", with_desk(baseline_comparison));
  print(8, "whole-model adaptivity", with_desk(adaptivity));
  print(9, "determinism and persistence", determinism);
  print(10, "weather generators", weather);
  std::cout << (failed == 0 ? "all criteria passed" : std::to_string(failed) + " criteria failed") << std::endl;
  return failed;
}
