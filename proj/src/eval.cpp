#include "more/eval.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <numeric>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "more/error.hpp"
#include "more/rng.hpp"

namespace more {

namespace {

std::size_t index_of(std::span<const std::string> names, const std::string& name, const char* what) {
  const auto it = std::find(names.begin(), names.end(), name);
  require(it != names.end(), Errc::invalid_params, std::string("unknown ") + what + " '" + name + "'");
  return static_cast<std::size_t>(it - names.begin());
}

std::uint64_t name_hash(const std::string& s) {
  Fnv1a h;
  h.update(s);
  return h.digest();
}

std::string format_cell(const Cell& c) {
  if (c.skipped) return "skipped";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", c.accuracy());
  return buf;
}

}  // namespace

void validate_threats(std::span<const Threat> threats) {
  require(!threats.empty(), Errc::invalid_params, "threat list is empty");
  std::set<std::string> seen;
  for (const auto& t : threats) {
    require(!t.name.empty(), Errc::invalid_params, "threat without a name");
    require(seen.insert(t.name).second, Errc::invalid_params, "duplicate threat name '" + t.name + "'");
  }
}

double Cell::accuracy() const {
  return total == 0 ? 0.0 : 100.0 * static_cast<double>(correct) / static_cast<double>(total);
}

const Cell& EvalReport::cell(const std::string& model, const std::string& threat) const {
  return cells[index_of(models, model, "model")][index_of(threats, threat, "threat")];
}

double EvalReport::accuracy(const std::string& model, const std::string& threat) const {
  return cell(model, threat).accuracy();
}

double EvalReport::mean_accuracy(const std::string& model, std::span<const std::string> threat_names) const {
  require(!threat_names.empty(), Errc::invalid_params, "mean over no threats");
  double s = 0.0;
  for (const auto& t : threat_names) s += accuracy(model, t);
  return s / static_cast<double>(threat_names.size());
}

void EvalReport::append(const EvalReport& other) {
  if (models.empty() && threats.empty()) threats = other.threats;
  require(threats == other.threats, Errc::invalid_params, "reports have different threat columns");
  for (std::size_t i = 0; i < other.models.size(); ++i) {
    require(std::find(models.begin(), models.end(), other.models[i]) == models.end(), Errc::invalid_params,
            "duplicate model row '" + other.models[i] + "'");
    models.push_back(other.models[i]);
    cells.push_back(other.cells[i]);
  }
  for (const auto& [k, v] : other.fingerprints) fingerprints[k] = v;
}

std::string Verdict::to_json() const {
  nlohmann::ordered_json j;
  j["model"] = model;
  j["threat"] = threat;
  j["index"] = index;
  j["predicted"] = predicted;
  j["true"] = truth;
  return j.dump();
}

EvalReport evaluate(const std::string& name, const Classifier& subject, const Dataset& test,
                    std::span<const Threat> threats, const EvalOptions& options) {
  validate_threats(threats);
  require(!test.empty(), Errc::empty_dataset, "test set is empty");
  require(options.batch_size >= 1, Errc::invalid_params, "batch size must be >= 1");
  EvalReport report;
  report.models = {name};
  for (const auto& t : threats) report.threats.push_back(t.name);
  report.cells.assign(1, std::vector<Cell>(threats.size()));
  report.fingerprints["data"] = std::to_string(test.fingerprint);

  std::vector<std::size_t> idx;
  for (std::size_t t = 0; t < threats.size(); ++t) {
    const Threat& threat = threats[t];
    if (options.skip.count(threat.name)) {
      report.cells[0][t].skipped = true;
      continue;
    }
    const Classifier* target = &subject;
    if (threat.is_attack()) {
      const auto& a = std::get<AttackThreat>(threat.kind);
      if (!a.transfer_source.empty()) {
        const auto it = options.transfer_sources.find(a.transfer_source);
        require(it != options.transfer_sources.end() && it->second != nullptr, Errc::invalid_params,
                "unknown transfer source '" + a.transfer_source + "'");
        target = it->second;
      }
      if (a.method != AttackMethod::random_search)
        require(target->differentiable(), Errc::gradient_unavailable,
                "white-box threat '" + threat.name + "' needs gradients from its target");
    }
    const auto started = std::chrono::steady_clock::now();
    Cell& cell = report.cells[0][t];
    for (std::size_t start = 0; start < test.size(); start += options.batch_size) {
      const std::size_t end = std::min(test.size(), start + options.batch_size);
      idx.resize(end - start);
      std::iota(idx.begin(), idx.end(), start);
      const Tensor x = test.images_at(idx);
      const auto y = test.labels_at(idx);
      const std::uint64_t seed = derive_seed(options.seed, name_hash(threat.name), start);
      const Tensor x_in = apply_threat(threat, *target, x, y, idx, seed);
      const auto pred = subject.predict(x_in);
      for (std::size_t i = 0; i < pred.size(); ++i) {
        cell.correct += pred[i] == y[i];
        if (options.on_verdict) options.on_verdict(Verdict{name, threat.name, idx[i], pred[i], y[i]});
      }
      cell.total += pred.size();
    }
    if (options.on_timing) {
      const std::chrono::duration<double> dt = std::chrono::steady_clock::now() - started;
      options.on_timing(name, threat.name, dt.count());
    }
  }
  return report;
}

std::string render_report(const EvalReport& report, ReportFormat format) {
  std::ostringstream os;
  if (format == ReportFormat::csv) {
    os << "model";
    for (const auto& t : report.threats) os << "," << t;
    os << "\n";
    for (std::size_t m = 0; m < report.models.size(); ++m) {
      os << report.models[m];
      for (const auto& c : report.cells[m]) os << "," << format_cell(c);
      os << "\n";
    }
    return os.str();
  }
  os << "| model |";
  for (const auto& t : report.threats) os << " " << t << " |";
  os << "\n|---|";
  for (std::size_t i = 0; i < report.threats.size(); ++i) os << "---:|";
  os << "\n";
  for (std::size_t m = 0; m < report.models.size(); ++m) {
    os << "| " << report.models[m] << " |";
    for (const auto& c : report.cells[m]) os << " " << format_cell(c) << " |";
    os << "\n";
  }
  return os.str();
}

EvalReport report_from_verdicts(std::span<const Verdict> verdicts, std::span<const std::string> models,
                                std::span<const std::string> threats) {
  EvalReport r;
  r.models.assign(models.begin(), models.end());
  r.threats.assign(threats.begin(), threats.end());
  r.cells.assign(models.size(), std::vector<Cell>(threats.size()));
  for (const auto& v : verdicts) {
    Cell& c = r.cells[index_of(models, v.model, "model")][index_of(threats, v.threat, "threat")];
    c.correct += v.predicted == v.truth;
    ++c.total;
  }
  return r;
}

std::vector<Verdict> read_verdicts(const std::string& jsonl) {
  std::vector<Verdict> out;
  std::istringstream in(jsonl);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line);
    out.push_back(Verdict{j.at("model"), j.at("threat"), j.at("index"), j.at("predicted"), j.at("true")});
  }
  return out;
}

}  // namespace more
