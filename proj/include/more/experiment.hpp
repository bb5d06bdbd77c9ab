#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "more/dataset.hpp"
#include "more/ensemble.hpp"
#include "more/eval.hpp"
#include "more/model.hpp"
#include "more/threat.hpp"
#include "more/training.hpp"

namespace more {

struct DataConfig {
  std::string dataset = "mnist";  // mnist | blobs
  std::size_t train_limit = 0;    // 0 keeps every example
  std::size_t test_limit = 0;
  std::size_t blobs_n = 200;
  std::size_t blobs_test_n = 200;
  float blobs_margin = 1.0f;
  std::size_t blobs_dim = 2;
  std::uint64_t blobs_seed = 0;
};

struct ExpertEntry {
  std::string name;
  std::string threat;  // training threat; "clean" for the clean expert
  TrainConfig train;
};

struct BaselineEntry {
  std::string name;
  std::string method;  // max | avg | msd
  std::vector<std::string> threats;
  TrainConfig train;
};

struct MoreEntry {
  bool enabled = false;
  std::string name = "more";
  std::vector<std::string> experts;
  std::vector<std::string> rotation;
  std::uint64_t gate_seed = 0;
  TrainConfig train;
};

struct EvalEntry {
  std::vector<std::string> threats;
  std::vector<std::string> models;  // empty: every declared model
  std::size_t limit = 0;
  std::uint64_t seed = 0;
  std::size_t batch_size = 250;
};

struct ExperimentConfig {
  DataConfig data;
  std::string arch_text;  // resolved against the dataset shape by resolve_arch
  TrainConfig train;
  std::map<std::string, Threat> threats;
  std::map<std::string, std::vector<std::string>> threat_targets;  // transfer threats: models evaluated
  std::vector<ExpertEntry> experts;
  std::vector<BaselineEntry> baselines;
  MoreEntry more;
  std::optional<EvalEntry> eval;
  std::filesystem::path output_dir = "runs/default";
};

/// Parses TOML text. Each override is "dotted.key=value" with a TOML value
/// (bare words are taken as strings). Relative output paths resolve against
/// base_dir. Throws ConfigParse.
ExperimentConfig parse_config(const std::string& toml_text, std::span<const std::string> overrides = {},
                              const std::filesystem::path& base_dir = ".");
ExperimentConfig load_config(const std::filesystem::path& path, std::span<const std::string> overrides = {});

ArchSpec resolve_arch(const std::string& text, const Dataset& sample);

struct RunResult {
  EvalReport report;
  std::vector<std::string> trained;  // stages that ran
  std::vector<std::string> cached;   // stages satisfied from disk
};

/// Stage front end shared by run_experiment and the CLI subcommands.
class Experiment {
 public:
  /// Independent stages (experts, baselines, evaluation cells) run on up to
  /// `workers` threads; 0 means $MORE_THREADS or the hardware concurrency.
  /// Results do not depend on the worker count.
  explicit Experiment(ExperimentConfig config, std::ostream* log = nullptr, std::size_t workers = 0);

  const ExperimentConfig& config() const noexcept { return cfg_; }
  const Dataset& train_data();
  const Dataset& test_data();
  ArchSpec arch();

  Expert expert(const std::string& name);
  Expert baseline(const std::string& name);
  Ensemble assembled();
  Ensemble finetuned();
  EvalReport evaluate_all();

  RunResult run();
  RunResult result() const { return RunResult{EvalReport{}, trained_, cached_}; }

  std::filesystem::path checkpoint_path(const std::string& name) const;
  std::filesystem::path ensemble_dir(const std::string& which) const;
  std::vector<Threat> threat_list(std::span<const std::string> names) const;
  const Threat& threat(const std::string& name) const;

 private:
  template <typename Fn>
  auto stage(const std::string& name, Fn&& fn);
  Expert cached_or_train(const std::string& name, std::uint64_t fp, const std::function<Expert()>& train);
  std::uint64_t expert_fingerprint(const ExpertEntry& e);
  std::uint64_t baseline_fingerprint(const BaselineEntry& b);
  std::uint64_t assemble_fingerprint();
  std::uint64_t finetune_fingerprint();
  std::string model_fingerprint(const std::string& name);
  void note(const std::string& line);
  void record(std::vector<std::string>& list, const std::string& name);
  void append_timing(const std::string& name, double seconds);
  std::ofstream open_log(const std::string& file) const;

  ExperimentConfig cfg_;
  std::ostream* log_;
  std::size_t workers_;
  std::unique_ptr<std::mutex> mu_ = std::make_unique<std::mutex>();
  std::optional<Dataset> train_, test_;
  std::map<std::string, Expert> models_;
  std::optional<Ensemble> assembled_, finetuned_;
  std::vector<std::string> trained_, cached_;
};

RunResult run_experiment(const std::filesystem::path& config_path, std::span<const std::string> overrides = {},
                         std::ostream* log = nullptr);

}  // namespace more
