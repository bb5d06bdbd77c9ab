#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "more/dataset.hpp"
#include "more/model.hpp"
#include "more/threat.hpp"

namespace more {

/// Ordered, uniquely named, non-empty.
void validate_threats(std::span<const Threat> threats);

struct Cell {
  std::size_t correct = 0;
  std::size_t total = 0;
  bool skipped = false;
  double accuracy() const;  // percent
};

struct EvalReport {
  std::vector<std::string> models;
  std::vector<std::string> threats;
  std::vector<std::vector<Cell>> cells;  // [model][threat]
  std::map<std::string, std::string> fingerprints;

  const Cell& cell(const std::string& model, const std::string& threat) const;
  double accuracy(const std::string& model, const std::string& threat) const;
  double mean_accuracy(const std::string& model, std::span<const std::string> threat_names) const;
  /// Appends the rows of `other`, which must have the same threat columns.
  void append(const EvalReport& other);
};

struct Verdict {
  std::string model;
  std::string threat;
  std::size_t index = 0;
  int predicted = 0;
  int truth = 0;
  std::string to_json() const;
};

struct EvalOptions {
  std::size_t batch_size = 250;
  std::uint64_t seed = 0;
  std::map<std::string, const Classifier*> transfer_sources;
  std::set<std::string> skip;  // threat names reported as skipped
  std::function<void(const Verdict&)> on_verdict;
  std::function<void(const std::string& model, const std::string& threat, double seconds)> on_timing;
};

/// One report row: accuracy of `subject` under every threat. Attacks run
/// against the subject itself unless the threat names a transfer source.
EvalReport evaluate(const std::string& name, const Classifier& subject, const Dataset& test,
                    std::span<const Threat> threats, const EvalOptions& options = {});

enum class ReportFormat { csv, markdown };

std::string render_report(const EvalReport& report, ReportFormat format);

/// Rebuilds a report from verdict records.
EvalReport report_from_verdicts(std::span<const Verdict> verdicts, std::span<const std::string> models,
                                std::span<const std::string> threats);
std::vector<Verdict> read_verdicts(const std::string& jsonl);

}  // namespace more
