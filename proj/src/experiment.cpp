#include "more/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdlib>
#include <exception>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>
#include <thread>

#include <nlohmann/json.hpp>
#include <toml.hpp>

#include "more/checkpoint.hpp"
#include "more/error.hpp"
#include "more/rng.hpp"

namespace more {

namespace fs = std::filesystem;

namespace {

// ---- TOML access -----------------------------------------------------------

[[noreturn]] void config_error(const std::string& what) { fail(Errc::config_parse, what); }

void check_keys(const toml::table& t, std::initializer_list<std::string_view> allowed, const std::string& where) {
  for (auto&& [k, v] : t) {
    if (std::find(allowed.begin(), allowed.end(), k.str()) == allowed.end())
      config_error("unknown key '" + std::string(k.str()) + "' in " + where);
  }
}

const toml::table* subtable(const toml::table& t, std::string_view key) {
  const toml::node* n = t.get(key);
  if (n == nullptr) return nullptr;
  if (!n->is_table()) config_error("'" + std::string(key) + "' must be a table");
  return n->as_table();
}

std::string get_string(const toml::table& t, std::string_view key, const std::string& def, const std::string& where) {
  const toml::node* n = t.get(key);
  if (n == nullptr) return def;
  if (auto v = n->value<std::string>(); v && n->is_string()) return *v;
  config_error(where + "." + std::string(key) + " must be a string");
}

double get_double(const toml::table& t, std::string_view key, double def, const std::string& where) {
  const toml::node* n = t.get(key);
  if (n == nullptr) return def;
  if (n->is_floating_point() || n->is_integer()) return *n->value<double>();
  config_error(where + "." + std::string(key) + " must be a number");
}

std::int64_t get_int(const toml::table& t, std::string_view key, std::int64_t def, const std::string& where) {
  const toml::node* n = t.get(key);
  if (n == nullptr) return def;
  if (n->is_integer()) return *n->value<std::int64_t>();
  config_error(where + "." + std::string(key) + " must be an integer");
}

std::size_t get_size(const toml::table& t, std::string_view key, std::size_t def, const std::string& where) {
  const std::int64_t v = get_int(t, key, static_cast<std::int64_t>(def), where);
  if (v < 0) config_error(where + "." + std::string(key) + " must be >= 0");
  return static_cast<std::size_t>(v);
}

bool get_bool(const toml::table& t, std::string_view key, bool def, const std::string& where) {
  const toml::node* n = t.get(key);
  if (n == nullptr) return def;
  if (n->is_boolean()) return *n->value<bool>();
  config_error(where + "." + std::string(key) + " must be a boolean");
}

std::vector<std::string> get_strings(const toml::table& t, std::string_view key, const std::string& where) {
  const toml::node* n = t.get(key);
  if (n == nullptr) return {};
  const toml::array* arr = n->as_array();
  if (arr == nullptr) config_error(where + "." + std::string(key) + " must be an array of strings");
  std::vector<std::string> out;
  for (const auto& el : *arr) {
    if (!el.is_string()) config_error(where + "." + std::string(key) + " must be an array of strings");
    out.push_back(*el.value<std::string>());
  }
  return out;
}

void apply_override(toml::table& root, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) config_error("override '" + assignment + "' is not key=value");
  const std::string path = assignment.substr(0, eq);
  const std::string value = assignment.substr(eq + 1);
  std::vector<std::string> parts;
  std::stringstream ss(path);
  for (std::string p; std::getline(ss, p, '.');) {
    if (p.empty()) config_error("override key '" + path + "' has an empty component");
    parts.push_back(p);
  }
  toml::table* cur = &root;
  for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
    if (cur->get(parts[i]) == nullptr) cur->insert(parts[i], toml::table{});
    cur = cur->get(parts[i])->as_table();
    if (cur == nullptr) config_error("override path '" + path + "' crosses a non-table value");
  }
  toml::table parsed;
  try {
    parsed = toml::parse("v = " + value);
  } catch (const toml::parse_error&) {
    parsed = toml::table{};
    parsed.insert("v", value);
  }
  cur->insert_or_assign(parts.back(), std::move(*parsed.get("v")));
}

TrainConfig parse_train(const toml::table& t, TrainConfig base, const std::string& where) {
  base.epochs = static_cast<int>(get_int(t, "epochs", base.epochs, where));
  base.batch_size = get_size(t, "batch_size", base.batch_size, where);
  base.lr = static_cast<float>(get_double(t, "lr", base.lr, where));
  base.lr_decay = static_cast<float>(get_double(t, "lr_decay", base.lr_decay, where));
  base.momentum = static_cast<float>(get_double(t, "momentum", base.momentum, where));
  base.seed = static_cast<std::uint64_t>(get_int(t, "seed", static_cast<std::int64_t>(base.seed), where));
  base.warmup_epochs = static_cast<int>(get_int(t, "warmup_epochs", base.warmup_epochs, where));
  try {
    base.validate();
  } catch (const Error& e) {
    config_error(where + ": " + e.what());
  }
  return base;
}

AttackSpec attack_preset(const std::string& name) {
  if (name.empty() || name == "linf") return AttackSpec::preset_linf();
  if (name == "l2") return AttackSpec::preset_l2();
  if (name == "desk_linf") return AttackSpec::desk_linf();
  if (name == "desk_l2") return AttackSpec::desk_l2();
  if (name == "l2_0.5") return AttackSpec::preset_l2(0.5f);
  if (name == "linf_6") return AttackSpec::preset_linf(6.0f / 255.0f);
  config_error("unknown attack preset '" + name + "'");
}

AttackSpec parse_attack_spec(const toml::table& t, const std::string& where) {
  AttackSpec s = attack_preset(get_string(t, "preset", "", where));
  if (t.get("norm")) {
    const std::string name = get_string(t, "norm", "linf", where);
    Norm n;
    try {
      n = parse_norm(name);
    } catch (const Error&) {
      config_error(where + ": unknown norm '" + name + "'");
    }
    if (!t.get("preset")) s = n == Norm::l2 ? AttackSpec::preset_l2() : AttackSpec::preset_linf();
    s.norm = n;
  }
  s.epsilon = static_cast<float>(get_double(t, "epsilon", s.epsilon, where));
  s.step_size = static_cast<float>(
      get_double(t, "step_size", s.norm == Norm::l2 && !t.get("step_size") ? s.epsilon / 5.0 : s.step_size, where));
  s.steps = static_cast<int>(get_int(t, "steps", s.steps, where));
  s.random_start = get_bool(t, "random_start", s.random_start, where);
  try {
    s.validate();
  } catch (const Error& e) {
    config_error(where + ": " + e.what());
  }
  return s;
}

Threat parse_threat(const std::string& name, const toml::table& t, const std::map<std::string, Threat>& earlier,
                    const std::string& where) {
  const std::string type = get_string(t, "type", "", where);
  if (type == "clean") {
    check_keys(t, {"type"}, where);
    return Threat::clean(name);
  }
  if (type == "fog" || type == "snow") {
    check_keys(t, {"type", "preset", "t", "light", "darkness", "density", "seed"}, where);
    PerturbSpec s = PerturbSpec::preset(get_string(t, "preset", type, where));
    if (s.kind != parse_weather(type)) config_error(where + ": preset does not match type");
    s.t = static_cast<float>(get_double(t, "t", s.t, where));
    s.light = static_cast<float>(get_double(t, "light", s.light, where));
    s.darkness = static_cast<float>(get_double(t, "darkness", s.darkness, where));
    s.density = static_cast<float>(get_double(t, "density", s.density, where));
    s.seed = static_cast<std::uint64_t>(get_int(t, "seed", 0, where));
    try {
      s.validate();
    } catch (const Error& e) {
      config_error(where + ": " + e.what());
    }
    return Threat::weather(name, s);
  }
  check_keys(t, {"type", "preset", "norm", "epsilon", "steps", "step_size", "random_start", "queries", "union",
                 "source", "targets"},
             where);
  AttackMethod method;
  try {
    method = parse_method(type);
  } catch (const Error&) {
    config_error(where + ": unknown threat type '" + type + "'");
  }
  Threat threat;
  if (method == AttackMethod::msd) {
    std::vector<AttackSpec> specs;
    for (const auto& member : get_strings(t, "union", where)) {
      const auto it = earlier.find(member);
      if (it == earlier.end() || !it->second.is_attack())
        config_error(where + ": union member '" + member + "' is not a previously declared attack");
      specs.push_back(std::get<AttackThreat>(it->second.kind).spec);
    }
    if (specs.empty()) config_error(where + ": msd needs a non-empty union");
    threat = Threat::msd(name, specs);
  } else {
    threat = Threat::attack(name, parse_attack_spec(t, where), method);
  }
  auto& a = std::get<AttackThreat>(threat.kind);
  a.queries = static_cast<int>(get_int(t, "queries", a.queries, where));
  a.transfer_source = get_string(t, "source", "", where);
  return threat;
}

// Attacks first so msd unions can reference them regardless of key order.
std::vector<std::string> threat_parse_order(const toml::table& threats) {
  std::vector<std::string> first, second;
  for (auto&& [k, v] : threats) {
    const toml::table* tt = v.as_table();
    const bool is_msd = tt != nullptr && tt->get("type") && tt->get("type")->value<std::string>() == "msd";
    (is_msd ? second : first).push_back(std::string(k.str()));
  }
  first.insert(first.end(), second.begin(), second.end());
  return first;
}

std::vector<std::size_t> parse_ints(const std::string& s) {
  std::vector<std::size_t> out;
  std::stringstream ss(s);
  for (std::string tok; std::getline(ss, tok, ',');)
    if (!tok.empty()) out.push_back(std::stoul(tok));
  return out;
}

std::uint64_t hash_strings(std::initializer_list<std::string> parts) {
  Fnv1a h;
  for (const auto& p : parts) {
    h.update_u64(p.size());
    h.update(p);
  }
  return h.digest();
}

void write_file(const fs::path& path, const std::string& text) {
  std::error_code ec;
  fs::create_directories(path.parent_path(), ec);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(Errc::io_error, "cannot write " + path.string());
  out << text;
}

}  // namespace

// ---- config ------------------------------------------------------------------

ExperimentConfig parse_config(const std::string& toml_text, std::span<const std::string> overrides,
                              const fs::path& base_dir) {
  toml::table root;
  try {
    root = toml::parse(toml_text);
  } catch (const toml::parse_error& e) {
    std::ostringstream os;
    os << "line " << e.source().begin.line << ": " << e.description();
    config_error(os.str());
  }
  for (const auto& o : overrides) apply_override(root, o);
  check_keys(root, {"data", "arch", "train", "threats", "experts", "baselines", "more", "eval", "output"}, "config");

  ExperimentConfig cfg;
  if (const auto* d = subtable(root, "data")) {
    check_keys(*d, {"dataset", "train_limit", "test_limit", "n", "test_n", "margin", "dim", "seed"}, "data");
    cfg.data.dataset = get_string(*d, "dataset", cfg.data.dataset, "data");
    if (cfg.data.dataset != "mnist" && cfg.data.dataset != "blobs")
      config_error("data.dataset must be mnist or blobs");
    cfg.data.train_limit = get_size(*d, "train_limit", 0, "data");
    cfg.data.test_limit = get_size(*d, "test_limit", 0, "data");
    cfg.data.blobs_n = get_size(*d, "n", cfg.data.blobs_n, "data");
    cfg.data.blobs_test_n = get_size(*d, "test_n", cfg.data.blobs_test_n, "data");
    cfg.data.blobs_margin = static_cast<float>(get_double(*d, "margin", cfg.data.blobs_margin, "data"));
    cfg.data.blobs_dim = get_size(*d, "dim", cfg.data.blobs_dim, "data");
    cfg.data.blobs_seed = static_cast<std::uint64_t>(get_int(*d, "seed", 0, "data"));
  }

  cfg.arch_text = cfg.data.dataset == "mnist" ? "desk_cnn" : "mlp:16";
  if (const auto* a = subtable(root, "arch")) {
    check_keys(*a, {"preset", "spec", "kind", "hidden", "conv"}, "arch");
    if (a->get("spec")) {
      cfg.arch_text = get_string(*a, "spec", "", "arch");
    } else if (a->get("preset")) {
      cfg.arch_text = get_string(*a, "preset", "", "arch");
    } else {
      auto list = [&](std::string_view key) {
        std::string s;
        if (const toml::node* n = a->get(key)) {
          const toml::array* arr = n->as_array();
          if (arr == nullptr) config_error("arch." + std::string(key) + " must be an integer array");
          for (const auto& el : *arr) {
            if (!el.is_integer() || *el.value<std::int64_t>() <= 0)
              config_error("arch." + std::string(key) + " entries must be positive integers");
            s += (s.empty() ? "" : ",") + std::to_string(*el.value<std::int64_t>());
          }
        }
        return s;
      };
      const std::string kind = get_string(*a, "kind", "mlp", "arch");
      if (kind == "mlp")
        cfg.arch_text = "mlp:" + list("hidden");
      else if (kind == "cnn")
        cfg.arch_text = "cnn:" + list("conv") + ":" + list("hidden");
      else
        config_error("arch.kind must be mlp or cnn");
    }
  }

  if (const auto* t = subtable(root, "train")) {
    check_keys(*t, {"epochs", "batch_size", "lr", "lr_decay", "momentum", "seed", "warmup_epochs"}, "train");
    cfg.train = parse_train(*t, cfg.train, "train");
  }

  if (const auto* ts = subtable(root, "threats")) {
    for (const auto& name : threat_parse_order(*ts)) {
      const auto* t = subtable(*ts, name);
      if (t == nullptr) config_error("threats." + name + " must be a table");
      cfg.threats.emplace(name, parse_threat(name, *t, cfg.threats, "threats." + name));
      if (t->get("targets")) cfg.threat_targets[name] = get_strings(*t, "targets", "threats." + name);
    }
  }
  cfg.threats.emplace("clean", Threat::clean());

  auto known_threat = [&](const std::string& name, const std::string& where) {
    if (!cfg.threats.count(name)) config_error(where + ": unknown threat '" + name + "'");
  };

  if (const auto* es = subtable(root, "experts")) {
    for (auto&& [k, v] : *es) {
      const std::string where = "experts." + std::string(k.str());
      const toml::table* t = v.as_table();
      if (t == nullptr) config_error(where + " must be a table");
      check_keys(*t, {"threat", "epochs", "batch_size", "lr", "lr_decay", "momentum", "seed", "warmup_epochs"}, where);
      ExpertEntry e{std::string(k.str()), get_string(*t, "threat", "clean", where), parse_train(*t, cfg.train, where)};
      known_threat(e.threat, where);
      const Threat& th = cfg.threats.at(e.threat);
      if (th.is_attack() && std::get<AttackThreat>(th.kind).method != AttackMethod::pgd)
        config_error(where + ": experts train against pgd, clean or weather threats");
      cfg.experts.push_back(std::move(e));
    }
  }

  if (const auto* bs = subtable(root, "baselines")) {
    for (auto&& [k, v] : *bs) {
      const std::string where = "baselines." + std::string(k.str());
      const toml::table* t = v.as_table();
      if (t == nullptr) config_error(where + " must be a table");
      check_keys(*t, {"method", "threats", "epochs", "batch_size", "lr", "lr_decay", "momentum", "seed", "warmup_epochs"}, where);
      BaselineEntry b{std::string(k.str()), get_string(*t, "method", "", where), get_strings(*t, "threats", where),
                      parse_train(*t, cfg.train, where)};
      if (b.method != "max" && b.method != "avg" && b.method != "msd")
        config_error(where + ".method must be max, avg or msd");
      if (b.threats.empty()) config_error(where + ".threats must be non-empty");
      for (const auto& th : b.threats) {
        known_threat(th, where);
        if (b.method == "msd" && !cfg.threats.at(th).is_attack())
          config_error(where + ": msd baselines take attack threats only");
      }
      cfg.baselines.push_back(std::move(b));
    }
  }

  if (const auto* m = subtable(root, "more")) {
    check_keys(*m, {"name", "experts", "rotation", "gate_seed", "epochs", "batch_size", "lr", "lr_decay", "momentum",
                    "seed"},
               "more");
    cfg.more.enabled = true;
    cfg.more.name = get_string(*m, "name", "more", "more");
    cfg.more.experts = get_strings(*m, "experts", "more");
    cfg.more.rotation = get_strings(*m, "rotation", "more");
    cfg.more.gate_seed = static_cast<std::uint64_t>(get_int(*m, "gate_seed", 0, "more"));
    TrainConfig ft = cfg.train;
    ft.lr = 0.01f;
    cfg.more.train = parse_train(*m, ft, "more");
    if (cfg.more.experts.empty()) config_error("more.experts must be non-empty");
    if (cfg.more.rotation.empty()) config_error("more.rotation must be non-empty");
    for (const auto& r : cfg.more.rotation) known_threat(r, "more.rotation");
  }

  if (const auto* e = subtable(root, "eval")) {
    check_keys(*e, {"threats", "models", "limit", "seed", "batch_size"}, "eval");
    EvalEntry ev;
    ev.threats = get_strings(*e, "threats", "eval");
    ev.models = get_strings(*e, "models", "eval");
    ev.limit = get_size(*e, "limit", 0, "eval");
    ev.seed = static_cast<std::uint64_t>(get_int(*e, "seed", 0, "eval"));
    ev.batch_size = get_size(*e, "batch_size", ev.batch_size, "eval");
    if (ev.threats.empty()) config_error("eval.threats must be non-empty");
    if (ev.batch_size == 0) config_error("eval.batch_size must be >= 1");
    for (const auto& t : ev.threats) known_threat(t, "eval.threats");
    cfg.eval = std::move(ev);
  }

  if (const auto* o = subtable(root, "output")) {
    check_keys(*o, {"dir"}, "output");
    cfg.output_dir = get_string(*o, "dir", cfg.output_dir.string(), "output");
  }
  if (cfg.output_dir.is_relative()) cfg.output_dir = base_dir / cfg.output_dir;
  return cfg;
}

ExperimentConfig load_config(const fs::path& path, std::span<const std::string> overrides) {
  std::ifstream in(path);
  if (!in) config_error("cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), overrides, path.parent_path().empty() ? fs::path(".") : path.parent_path());
}

ArchSpec resolve_arch(const std::string& text, const Dataset& sample) {
  const Shape in = sample.example_shape();
  const std::size_t k = sample.num_classes;
  try {
    if (text == "desk_cnn") return ArchSpec::cnn(in, {ConvStage{8}, ConvStage{16}}, {}, k);
    if (text == "desk_mlp") return ArchSpec::mlp(in, {256}, k);
    if (text.rfind("mlp:", 0) == 0) return ArchSpec::mlp(in, parse_ints(text.substr(4)), k);
    if (text.rfind("cnn:", 0) == 0) {
      const auto rest = text.substr(4);
      const auto colon = rest.find(':');
      std::vector<ConvStage> conv;
      for (std::size_t f : parse_ints(rest.substr(0, colon))) conv.push_back(ConvStage{f});
      return ArchSpec::cnn(in, conv, colon == std::string::npos ? std::vector<std::size_t>{} : parse_ints(rest.substr(colon + 1)),
                           k);
    }
    return ArchSpec::parse(text);
  } catch (const std::invalid_argument&) {
    config_error("bad architecture '" + text + "'");
  } catch (const Error& e) {
    if (e.code() != Errc::invalid_arch) throw;
    config_error("bad architecture '" + text + "': " + e.what());
  }
}

// ---- stages ------------------------------------------------------------------

namespace {

std::size_t default_workers() {
  if (const char* s = std::getenv("MORE_THREADS")) {
    char* end = nullptr;
    const unsigned long n = std::strtoul(s, &end, 10);
    if (end != s && *end == '\0' && n > 0) return n;
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

// Runs fn(0..n-1) on up to `workers` threads. The lowest-index failure is
// rethrown after every task has finished.
void parallel_for(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& fn) {
  std::vector<std::exception_ptr> errors(n);
  std::atomic<std::size_t> next{0};
  const auto work = [&] {
    for (std::size_t i; (i = next.fetch_add(1)) < n;) {
      try {
        fn(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t w = 1; w < std::min(workers, n); ++w) pool.emplace_back(work);
  work();
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace

Experiment::Experiment(ExperimentConfig config, std::ostream* log, std::size_t workers)
    : cfg_(std::move(config)), log_(log), workers_(workers == 0 ? default_workers() : workers) {}

void Experiment::note(const std::string& line) {
  std::lock_guard lock(*mu_);
  if (log_ != nullptr) *log_ << line << std::endl;
}

void Experiment::record(std::vector<std::string>& list, const std::string& name) {
  std::lock_guard lock(*mu_);
  list.push_back(name);
}

void Experiment::append_timing(const std::string& name, double seconds) {
  std::lock_guard lock(*mu_);
  std::ofstream t(cfg_.output_dir / "logs" / "stage_timings.csv", std::ios::app);
  t << name << "," << seconds << "\n";
}

std::ofstream Experiment::open_log(const std::string& file) const {
  const fs::path p = cfg_.output_dir / "logs" / file;
  std::error_code ec;
  fs::create_directories(p.parent_path(), ec);
  std::ofstream out(p, std::ios::trunc);
  if (!out) fail(Errc::io_error, "cannot write " + p.string());
  return out;
}

template <typename Fn>
auto Experiment::stage(const std::string& name, Fn&& fn) {
  try {
    return fn();
  } catch (const Error& e) {
    if (e.code() == Errc::stage_failure || e.code() == Errc::config_parse) throw;
    throw Error(Errc::stage_failure, name + ": " + e.what());
  } catch (const std::exception& e) {
    throw Error(Errc::stage_failure, name + ": " + e.what());
  }
}

const Dataset& Experiment::train_data() {
  if (!train_) {
    train_ = stage("data", [&] {
      const auto& d = cfg_.data;
      return d.dataset == "mnist" ? load_mnist("train", d.train_limit)
                                  : synth_blobs(d.blobs_n, d.blobs_margin, d.blobs_dim, d.blobs_seed);
    });
  }
  return *train_;
}

const Dataset& Experiment::test_data() {
  if (!test_) {
    test_ = stage("data", [&] {
      const auto& d = cfg_.data;
      Dataset t = d.dataset == "mnist"
                      ? load_mnist("test", d.test_limit)
                      : synth_blobs(d.blobs_test_n, d.blobs_margin, d.blobs_dim, derive_seed(d.blobs_seed, 1));
      if (cfg_.eval && cfg_.eval->limit != 0 && cfg_.eval->limit < t.size()) t = t.head(cfg_.eval->limit);
      return t;
    });
  }
  return *test_;
}

ArchSpec Experiment::arch() { return resolve_arch(cfg_.arch_text, train_data()); }

const Threat& Experiment::threat(const std::string& name) const {
  const auto it = cfg_.threats.find(name);
  require(it != cfg_.threats.end(), Errc::config_parse, "unknown threat '" + name + "'");
  return it->second;
}

std::vector<Threat> Experiment::threat_list(std::span<const std::string> names) const {
  std::vector<Threat> out;
  for (const auto& n : names) out.push_back(threat(n));
  return out;
}

fs::path Experiment::checkpoint_path(const std::string& name) const {
  return cfg_.output_dir / "checkpoints" / (name + ".ckpt");
}

fs::path Experiment::ensemble_dir(const std::string& which) const { return cfg_.output_dir / which; }

std::uint64_t Experiment::expert_fingerprint(const ExpertEntry& e) {
  return hash_strings({"expert", threat(e.threat).describe(), arch().to_string(), e.train.describe(),
                       std::to_string(train_data().fingerprint)});
}

std::uint64_t Experiment::baseline_fingerprint(const BaselineEntry& b) {
  std::string threats;
  for (const auto& t : b.threats) threats += threat(t).describe() + ";";
  return hash_strings({"baseline", b.method, threats, arch().to_string(), b.train.describe(),
                       std::to_string(train_data().fingerprint)});
}

Expert Experiment::cached_or_train(const std::string& name, std::uint64_t fp, const std::function<Expert()>& train) {
  const fs::path path = checkpoint_path(name);
  if (fs::exists(path)) {
    try {
      const Checkpoint ck = load_checkpoint(path);
      const auto it = ck.metadata.find("stage_fingerprint");
      if (it != ck.metadata.end() && it->second == std::to_string(fp)) {
        Expert e{model_from_checkpoint(ck), ck.metadata.at("provenance"),
                 std::stoull(ck.metadata.at("training_fingerprint"))};
        record(cached_, name);
        note("[cached] " + name);
        return e;
      }
      note("[stale] " + name + ": fingerprint changed, retraining");
    } catch (const Error& e) {
      note("[stale] " + name + ": " + e.what());
    }
  }
  note("[train] " + name);
  const auto started = std::chrono::steady_clock::now();
  Expert e = train();
  const std::chrono::duration<double> dt = std::chrono::steady_clock::now() - started;
  save_model(e.model, path,
             {{"stage_fingerprint", std::to_string(fp)},
              {"provenance", e.provenance},
              {"training_fingerprint", std::to_string(e.fingerprint)}});
  record(trained_, name);
  append_timing(name, dt.count());
  return e;
}

Expert Experiment::expert(const std::string& name) {
  {
    std::lock_guard lock(*mu_);
    if (auto it = models_.find(name); it != models_.end()) return it->second;
  }
  const auto entry = std::find_if(cfg_.experts.begin(), cfg_.experts.end(), [&](const auto& e) { return e.name == name; });
  Expert result = stage("expert " + name, [&] {
    if (entry == cfg_.experts.end()) {
      // Not declared: an existing checkpoint is used as is.
      const Checkpoint ck = load_checkpoint(checkpoint_path(name));
      record(cached_, name);
      const auto prov = ck.metadata.find("provenance");
      return Expert{model_from_checkpoint(ck), prov == ck.metadata.end() ? "" : prov->second, 0};
    }
    const ArchSpec a = arch();
    return cached_or_train(name, expert_fingerprint(*entry), [&] {
      auto log = open_log("train_" + name + ".jsonl");
      return train_expert(train_data(), a, threat(entry->threat), entry->train,
                          [&](const EpochRecord& r) {
                            log << r.to_json() << "\n";
                            note("  " + name + " " + r.to_json());
                          });
    });
  });
  std::lock_guard lock(*mu_);
  models_.emplace(name, result);
  return result;
}

Expert Experiment::baseline(const std::string& name) {
  {
    std::lock_guard lock(*mu_);
    if (auto it = models_.find(name); it != models_.end()) return it->second;
  }
  const auto entry =
      std::find_if(cfg_.baselines.begin(), cfg_.baselines.end(), [&](const auto& b) { return b.name == name; });
  if (entry == cfg_.baselines.end()) return expert(name);
  Expert result = stage("baseline " + name, [&] {
    const ArchSpec a = arch();
    return cached_or_train(name, baseline_fingerprint(*entry), [&] {
      auto log = open_log("train_" + name + ".jsonl");
      const auto cb = [&](const EpochRecord& r) {
        log << r.to_json() << "\n";
        note("  " + name + " " + r.to_json());
      };
      const auto threats = threat_list(entry->threats);
      if (entry->method == "max") return train_max(train_data(), a, std::span<const Threat>(threats), entry->train, cb);
      if (entry->method == "avg") return train_avg(train_data(), a, std::span<const Threat>(threats), entry->train, cb);
      std::vector<AttackSpec> specs;
      for (const auto& t : threats) specs.push_back(std::get<AttackThreat>(t.kind).spec);
      return train_msd(train_data(), a, specs, entry->train, cb);
    });
  });
  std::lock_guard lock(*mu_);
  models_.emplace(name, result);
  return result;
}

std::uint64_t Experiment::assemble_fingerprint() {
  std::string parts;
  for (const auto& name : cfg_.more.experts) {
    const auto entry = std::find_if(cfg_.experts.begin(), cfg_.experts.end(), [&](const auto& e) { return e.name == name; });
    parts += name + "=" +
             (entry == cfg_.experts.end() ? std::to_string(expert(name).model.fingerprint())
                                          : std::to_string(expert_fingerprint(*entry))) +
             ";";
  }
  return hash_strings({"assemble", parts, std::to_string(cfg_.more.gate_seed)});
}

std::uint64_t Experiment::finetune_fingerprint() {
  std::string rot;
  for (const auto& r : cfg_.more.rotation) rot += threat(r).describe() + ";";
  return hash_strings({"finetune", std::to_string(assemble_fingerprint()), rot, cfg_.more.train.describe(),
                       std::to_string(train_data().fingerprint)});
}

namespace {

std::optional<Ensemble> load_cached_ensemble(const fs::path& manifest, std::uint64_t fp) {
  if (!fs::exists(manifest)) return std::nullopt;
  try {
    const Checkpoint ck = load_checkpoint(manifest);
    const auto it = ck.metadata.find("stage_fingerprint");
    if (it == ck.metadata.end() || it->second != std::to_string(fp)) return std::nullopt;
    return load_ensemble(manifest);
  } catch (const Error&) {
    return std::nullopt;
  }
}

}  // namespace

Ensemble Experiment::assembled() {
  if (assembled_) return *assembled_;
  require(cfg_.more.enabled, Errc::config_parse, "config has no [more] section");
  assembled_ = stage("assemble", [&] {
    const std::uint64_t fp = assemble_fingerprint();
    const fs::path dir = ensemble_dir("assembled");
    if (auto cached = load_cached_ensemble(dir / "ensemble.ckpt", fp)) {
      cached_.push_back("assemble");
      note("[cached] assemble");
      return *cached;
    }
    std::vector<Expert> experts;
    for (const auto& name : cfg_.more.experts) experts.push_back(expert(name));
    note("[run] assemble");
    Ensemble ens = assemble(std::move(experts), cfg_.more.gate_seed);
    save_ensemble(ens, dir, {}, {{"stage_fingerprint", std::to_string(fp)}});
    trained_.push_back("assemble");
    return ens;
  });
  return *assembled_;
}

Ensemble Experiment::finetuned() {
  if (finetuned_) return *finetuned_;
  require(cfg_.more.enabled, Errc::config_parse, "config has no [more] section");
  finetuned_ = stage("finetune", [&] {
    const std::uint64_t fp = finetune_fingerprint();
    const fs::path dir = ensemble_dir(cfg_.more.name);
    const auto rotation = threat_list(cfg_.more.rotation);
    if (auto cached = load_cached_ensemble(dir / "ensemble.ckpt", fp)) {
      cached_.push_back("finetune");
      note("[cached] finetune");
      return *cached;
    }
    Ensemble start = assembled();
    note("[train] finetune " + cfg_.more.name);
    auto log = open_log("train_" + cfg_.more.name + ".jsonl");
    const auto started = std::chrono::steady_clock::now();
    Ensemble ens = more_finetune(std::move(start), train_data(), rotation, cfg_.more.train, [&](const EpochRecord& r) {
      log << r.to_json() << "\n";
      note("  " + cfg_.more.name + " " + r.to_json());
    });
    const std::chrono::duration<double> dt = std::chrono::steady_clock::now() - started;
    save_ensemble(ens, dir, rotation, {{"stage_fingerprint", std::to_string(fp)}});
    trained_.push_back("finetune");
    append_timing("finetune", dt.count());
    return ens;
  });
  return *finetuned_;
}

std::string Experiment::model_fingerprint(const std::string& name) {
  if (cfg_.more.enabled && name == cfg_.more.name) {
    Fnv1a h;
    const Ensemble& e = *finetuned_;
    for (const auto& ex : e.experts()) h.update_u64(ex.model.fingerprint());
    h.update_u64(e.gate().fingerprint());
    return std::to_string(h.digest());
  }
  return std::to_string(models_.at(name).model.fingerprint());
}

namespace {

// A previous report is reused when every evaluation input matches.
std::optional<EvalReport> load_cached_report(const fs::path& out, const std::vector<std::string>& models,
                                             const std::vector<std::string>& threats,
                                             const std::map<std::string, std::string>& fingerprints) {
  if (!fs::exists(out / "report.json") || !fs::exists(out / "verdicts.jsonl")) return std::nullopt;
  try {
    std::ifstream in(out / "report.json");
    const nlohmann::json j = nlohmann::json::parse(in);
    if (j.at("models").get<std::vector<std::string>>() != models) return std::nullopt;
    if (j.at("threats").get<std::vector<std::string>>() != threats) return std::nullopt;
    if (j.at("fingerprints").get<std::map<std::string, std::string>>() != fingerprints) return std::nullopt;
    EvalReport r;
    r.models = models;
    r.threats = threats;
    r.fingerprints = fingerprints;
    r.cells.assign(models.size(), std::vector<Cell>(threats.size()));
    for (std::size_t m = 0; m < models.size(); ++m)
      for (std::size_t t = 0; t < threats.size(); ++t) {
        const auto& c = j.at("cells").at(models[m]).at(threats[t]);
        if (c.is_string()) r.cells[m][t] = Cell{0, 0, true};
        else r.cells[m][t] = Cell{c.at("correct").get<std::size_t>(), c.at("total").get<std::size_t>()};
      }
    return r;
  } catch (const nlohmann::json::exception&) {
    return std::nullopt;
  }
}

}  // namespace

EvalReport Experiment::evaluate_all() {
  require(cfg_.eval.has_value(), Errc::config_parse, "config has no [eval] section");
  const EvalEntry& ev = *cfg_.eval;
  std::vector<std::string> names = ev.models;
  if (names.empty()) {
    for (const auto& e : cfg_.experts) names.push_back(e.name);
    for (const auto& b : cfg_.baselines) names.push_back(b.name);
    if (cfg_.more.enabled) names.push_back(cfg_.more.name);
  }
  return stage("eval", [&] {
    const auto threats = threat_list(ev.threats);
    const Dataset& test = test_data();
    // Resolve subjects and transfer sources before any evaluation starts.
    for (const auto& n : names) {
      if (cfg_.more.enabled && n == cfg_.more.name)
        finetuned();
      else
        baseline(n);
    }
    for (const auto& t : threats) {
      if (t.is_attack() && !std::get<AttackThreat>(t.kind).transfer_source.empty()) {
        const std::string& src = std::get<AttackThreat>(t.kind).transfer_source;
        if (!(cfg_.more.enabled && src == cfg_.more.name)) baseline(src);
      }
    }
    note("[run] eval");
    EvalOptions opts;
    opts.batch_size = ev.batch_size;
    opts.seed = ev.seed;
    for (auto& [n, e] : models_) opts.transfer_sources[n] = &e.model;
    if (finetuned_) opts.transfer_sources[cfg_.more.name] = &*finetuned_;

    validate_threats(threats);

    std::map<std::string, std::string> fingerprints;
    fingerprints["data"] = std::to_string(test.fingerprint);
    for (const auto& n : names) fingerprints["model." + n] = model_fingerprint(n);
    std::string threat_desc;
    for (const auto& t : threats) {
      threat_desc += t.name + "=" + t.describe();
      if (auto it = cfg_.threat_targets.find(t.name); it != cfg_.threat_targets.end())
        for (const auto& target : it->second) threat_desc += ":to=" + target;
      threat_desc += ";";
      if (t.is_attack() && !std::get<AttackThreat>(t.kind).transfer_source.empty()) {
        const std::string& src = std::get<AttackThreat>(t.kind).transfer_source;
        fingerprints["source." + src] = model_fingerprint(src);
      }
    }
    fingerprints["threats"] = std::to_string(hash_strings({threat_desc}));
    fingerprints["eval_seed"] = std::to_string(ev.seed);
    fingerprints["eval_batch"] = std::to_string(ev.batch_size);
    if (auto cached = load_cached_report(cfg_.output_dir, names, ev.threats, fingerprints)) {
      record(cached_, "eval");
      return *cached;
    }

    // One task per (model, threat) cell; outputs are stitched back in
    // model-major order so the logs do not depend on scheduling.
    struct Task {
      std::size_t model, threat;
      Cell cell;
      std::string verdicts, timing;
    };
    std::vector<Task> tasks;
    for (std::size_t m = 0; m < names.size(); ++m)
      for (std::size_t t = 0; t < threats.size(); ++t) tasks.push_back(Task{m, t, {}, {}, {}});
    const auto is_more = [&](const std::string& n) { return cfg_.more.enabled && n == cfg_.more.name; };
    // Ensemble attacks are the slowest cells; start them first.
    std::vector<std::size_t> schedule(tasks.size());
    std::iota(schedule.begin(), schedule.end(), 0);
    std::stable_sort(schedule.begin(), schedule.end(), [&](std::size_t a, std::size_t b) {
      const auto cost = [&](const Task& k) { return (is_more(names[k.model]) ? 2 : 0) + threats[k.threat].is_attack(); };
      return cost(tasks[a]) > cost(tasks[b]);
    });
    parallel_for(schedule.size(), workers_, [&](std::size_t s) {
      Task& task = tasks[schedule[s]];
      const std::string& n = names[task.model];
      const Classifier& subject =
          is_more(n) ? static_cast<const Classifier&>(*finetuned_) : static_cast<const Classifier&>(models_.at(n).model);
      EvalOptions local = opts;
      for (const auto& [tname, targets] : cfg_.threat_targets)
        if (std::find(targets.begin(), targets.end(), n) == targets.end()) local.skip.insert(tname);
      std::ostringstream verdicts, timing;
      local.on_verdict = [&](const Verdict& v) { verdicts << v.to_json() << "\n"; };
      local.on_timing = [&](const std::string& m, const std::string& t, double sec) {
        timing << m << "," << t << "," << sec << "\n";
        note("  " + m + " / " + t + " done in " + std::to_string(sec) + " s");
      };
      const EvalReport one = evaluate(n, subject, test, std::span<const Threat>(&threats[task.threat], 1), local);
      task.cell = one.cells[0][0];
      task.verdicts = verdicts.str();
      task.timing = timing.str();
    });

    std::string verdicts, timings;
    EvalReport report;
    report.threats = ev.threats;
    report.cells.assign(names.size(), std::vector<Cell>(threats.size()));
    for (const auto& task : tasks) {
      report.cells[task.model][task.threat] = task.cell;
      verdicts += task.verdicts;
      timings += task.timing;
    }
    report.models = names;
    report.fingerprints = fingerprints;

    const fs::path out = cfg_.output_dir;
    write_file(out / "report.csv", render_report(report, ReportFormat::csv));
    write_file(out / "report.md", render_report(report, ReportFormat::markdown));
    write_file(out / "verdicts.jsonl", verdicts);
    write_file(out / "logs" / "eval_timings.csv", "model,threat,seconds\n" + timings);
    nlohmann::ordered_json j;
    j["models"] = report.models;
    j["threats"] = report.threats;
    j["fingerprints"] = report.fingerprints;
    for (std::size_t m = 0; m < report.models.size(); ++m)
      for (std::size_t t = 0; t < report.threats.size(); ++t) {
        const Cell& c = report.cells[m][t];
        j["cells"][report.models[m]][report.threats[t]] =
            c.skipped ? nlohmann::ordered_json("skipped")
                      : nlohmann::ordered_json{{"correct", c.correct}, {"total", c.total}};
      }
    write_file(out / "report.json", j.dump(2) + "\n");
    return report;
  });
}

RunResult Experiment::run() {
  std::vector<std::string> order;
  for (const auto& e : cfg_.experts) order.push_back(e.name);
  const std::size_t n_experts = order.size();
  for (const auto& b : cfg_.baselines) order.push_back(b.name);
  if (!order.empty()) {
    train_data();
    arch();
  }
  parallel_for(order.size(), workers_, [&](std::size_t i) { i < n_experts ? expert(order[i]) : baseline(order[i]); });
  // Completion order depends on scheduling; report stages in config order.
  const auto by_config = [&](std::vector<std::string>& list) {
    std::stable_sort(list.begin(), list.end(), [&](const std::string& a, const std::string& b) {
      return std::find(order.begin(), order.end(), a) < std::find(order.begin(), order.end(), b);
    });
  };
  by_config(trained_);
  by_config(cached_);
  if (cfg_.more.enabled) finetuned();
  RunResult r;
  if (cfg_.eval) r.report = evaluate_all();
  r.trained = trained_;
  r.cached = cached_;
  return r;
}

RunResult run_experiment(const fs::path& config_path, std::span<const std::string> overrides, std::ostream* log) {
  Experiment exp(load_config(config_path, overrides), log);
  return exp.run();
}

}  // namespace more
