#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "more/checkpoint.hpp"
#include "more/error.hpp"
#include "more/eval.hpp"
#include "more/experiment.hpp"

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitStage = 3;

struct Common {
  std::string config;
  std::vector<std::string> overrides;
  std::string output;
  bool quiet = false;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("config", c.config, "Experiment config (TOML)")->required()->check(CLI::ExistingFile);
  cmd->add_option("--set", c.overrides, "Override a config key, e.g. --set train.epochs=3");
  cmd->add_option("--output", c.output, "Output directory (overrides output.dir)");
  cmd->add_flag("-q,--quiet", c.quiet, "Only print the final report");
}

more::Experiment open_experiment(const Common& c) {
  std::vector<std::string> overrides = c.overrides;
  if (!c.output.empty()) overrides.push_back("output.dir=\"" + c.output + "\"");
  return more::Experiment(more::load_config(c.config, overrides), c.quiet ? nullptr : &std::cerr);
}

std::string read_text(const std::string& path) {
  std::ifstream in(path);
  if (!in) more::fail(more::Errc::io_error, "cannot read " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

int run_report(const std::string& run_dir, const std::string& format) {
  const auto meta = nlohmann::json::parse(read_text(run_dir + "/report.json"));
  const std::vector<std::string> models = meta.at("models");
  const std::vector<std::string> threats = meta.at("threats");
  const auto verdicts = more::read_verdicts(read_text(run_dir + "/verdicts.jsonl"));
  more::EvalReport report = more::report_from_verdicts(verdicts, models, threats);
  for (std::size_t m = 0; m < models.size(); ++m)
    for (std::size_t t = 0; t < threats.size(); ++t)
      report.cells[m][t].skipped = meta["cells"][models[m]][threats[t]].is_string();
  std::cout << more::render_report(report, format == "csv" ? more::ReportFormat::csv : more::ReportFormat::markdown);
  return 0;
}

int run_attack(more::Experiment& exp, const std::string& model, const std::string& threat_name, std::size_t index,
               const std::string& out_path) {
  const auto& cfg = exp.config();
  const more::Dataset& test = exp.test_data();
  more::require(index < test.size(), more::Errc::invalid_params, "index beyond the test set");
  const std::size_t idx[1] = {index};
  const more::Tensor x = test.images_at(idx);
  const auto y = test.labels_at(idx);
  const more::Threat& threat = exp.threat(threat_name);

  std::optional<more::Ensemble> ens;
  std::optional<more::Expert> single;
  const more::Classifier* subject;
  if (cfg.more.enabled && model == cfg.more.name) {
    ens = exp.finetuned();
    subject = &*ens;
  } else {
    single = exp.baseline(model);
    subject = &single->model;
  }
  const std::uint64_t seed = cfg.eval ? cfg.eval->seed : 0;
  const more::Tensor x_adv = more::apply_threat(threat, *subject, x, y, idx, seed);
  nlohmann::ordered_json j;
  j["model"] = model;
  j["threat"] = threat.describe();
  j["index"] = index;
  j["label"] = y[0];
  j["clean_prediction"] = subject->predict(x)[0];
  j["adversarial_prediction"] = subject->predict(x_adv)[0];
  j["linf"] = more::perturbation_norms(x_adv, x, more::Norm::linf)[0];
  j["l2"] = more::perturbation_norms(x_adv, x, more::Norm::l2)[0];
  j["shape"] = test.example_shape();
  j["clean"] = std::vector<float>(x.data().begin(), x.data().end());
  j["adversarial"] = std::vector<float>(x_adv.data().begin(), x_adv.data().end());
  if (out_path.empty()) {
    std::cout << j.dump() << "\n";
  } else {
    std::ofstream(out_path) << j.dump() << "\n";
    std::cerr << "clean " << j["clean_prediction"] << " -> adversarial " << j["adversarial_prediction"]
              << " (label " << y[0] << ")\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Mixture of robust experts: training, fine-tuning and evaluation"};
  app.require_subcommand(1);

  Common run_c, expert_c, baseline_c, assemble_c, finetune_c, eval_c, attack_c;
  std::string expert_name, baseline_name, report_dir, report_format = "markdown";
  std::string attack_model, attack_threat, attack_out;
  std::size_t attack_index = 0;

  auto* run = app.add_subcommand("run", "Run every declared stage and write the report");
  add_common(run, run_c);
  auto* train_expert = app.add_subcommand("train-expert", "Train (or load from cache) one expert");
  add_common(train_expert, expert_c);
  train_expert->add_option("name", expert_name, "Expert name from [experts.NAME]")->required();
  auto* train_baseline = app.add_subcommand("train-baseline", "Train (or load from cache) one baseline");
  add_common(train_baseline, baseline_c);
  train_baseline->add_option("name", baseline_name, "Baseline name from [baselines.NAME]")->required();
  auto* assemble = app.add_subcommand("assemble", "Build the ensemble with a fresh gate");
  add_common(assemble, assemble_c);
  auto* finetune = app.add_subcommand("finetune", "Fine-tune gate and expert heads");
  add_common(finetune, finetune_c);
  auto* eval = app.add_subcommand("eval", "Evaluate the models listed in [eval]");
  add_common(eval, eval_c);
  auto* report = app.add_subcommand("report", "Re-render a report from a run's verdict log");
  report->add_option("run_dir", report_dir, "Output directory of a finished run")->required()->check(CLI::ExistingDirectory);
  report->add_option("--format", report_format, "csv or markdown")->check(CLI::IsMember({"csv", "markdown"}));
  auto* attack = app.add_subcommand("attack", "Dump one adversarial example as JSON");
  add_common(attack, attack_c);
  attack->add_option("--model", attack_model, "Model name")->required();
  attack->add_option("--threat", attack_threat, "Threat name")->required();
  attack->add_option("--index", attack_index, "Test-set index");
  attack->add_option("--out", attack_out, "Write JSON here instead of stdout");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  try {
    if (*run) {
      auto exp = open_experiment(run_c);
      const auto result = exp.run();
      std::cout << more::render_report(result.report, more::ReportFormat::markdown);
    } else if (*train_expert) {
      auto exp = open_experiment(expert_c);
      const auto e = exp.expert(expert_name);
      std::cout << expert_name << " " << e.provenance << " " << exp.checkpoint_path(expert_name).string() << "\n";
    } else if (*train_baseline) {
      auto exp = open_experiment(baseline_c);
      const auto e = exp.baseline(baseline_name);
      std::cout << baseline_name << " " << e.provenance << " " << exp.checkpoint_path(baseline_name).string() << "\n";
    } else if (*assemble) {
      auto exp = open_experiment(assemble_c);
      const auto ens = exp.assembled();
      std::cout << "assembled " << ens.size() << " experts in " << exp.ensemble_dir("assembled").string() << "\n";
    } else if (*finetune) {
      auto exp = open_experiment(finetune_c);
      exp.finetuned();
      std::cout << "fine-tuned ensemble in " << exp.ensemble_dir(exp.config().more.name).string() << "\n";
    } else if (*eval) {
      auto exp = open_experiment(eval_c);
      std::cout << more::render_report(exp.evaluate_all(), more::ReportFormat::markdown);
    } else if (*report) {
      return run_report(report_dir, report_format);
    } else if (*attack) {
      auto exp = open_experiment(attack_c);
      return run_attack(exp, attack_model, attack_threat, attack_index, attack_out);
    }
  } catch (const more::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.code() == more::Errc::config_parse ? kExitConfig : kExitStage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitStage;
  }
  return 0;
}
