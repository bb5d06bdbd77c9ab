#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "more/attacks.hpp"
#include "more/model.hpp"
#include "more/weather.hpp"

namespace more {

struct CleanThreat {};

enum class AttackMethod { pgd, fgsm, msd, random_search };

struct AttackThreat {
  AttackMethod method = AttackMethod::pgd;
  AttackSpec spec;
  std::vector<AttackSpec> union_specs;  // msd only; spec is ignored when set
  int queries = 1000;                   // random_search only
  std::string transfer_source;          // empty: attack the subject itself
};

struct Threat {
  std::string name;
  std::variant<CleanThreat, AttackThreat, PerturbSpec> kind;

  static Threat clean(std::string name = "clean");
  static Threat attack(std::string name, AttackSpec spec, AttackMethod method = AttackMethod::pgd);
  static Threat msd(std::string name, std::vector<AttackSpec> specs);
  static Threat weather(std::string name, PerturbSpec spec);

  bool is_clean() const { return std::holds_alternative<CleanThreat>(kind); }
  bool is_attack() const { return std::holds_alternative<AttackThreat>(kind); }
  bool is_weather() const { return std::holds_alternative<PerturbSpec>(kind); }
  std::string describe() const;
};

std::string method_name(AttackMethod m);
AttackMethod parse_method(const std::string& s);

/// Perturbed copy of a batch. Attacks are computed against `target`, with
/// per-call seed `seed`; weather uses the dataset indices for its streams.
Tensor apply_threat(const Threat& threat, const Classifier& target, const Tensor& x, std::span<const int> labels,
                    std::span<const std::size_t> indices, std::uint64_t seed);

}  // namespace more
