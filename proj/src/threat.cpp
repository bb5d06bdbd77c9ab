#include "more/threat.hpp"

#include "more/error.hpp"

namespace more {

Threat Threat::clean(std::string name) { return Threat{std::move(name), CleanThreat{}}; }

Threat Threat::attack(std::string name, AttackSpec spec, AttackMethod method) {
  AttackThreat a;
  a.method = method;
  a.spec = spec;
  return Threat{std::move(name), std::move(a)};
}

Threat Threat::msd(std::string name, std::vector<AttackSpec> specs) {
  require(!specs.empty(), Errc::invalid_params, "msd threat needs at least one spec");
  AttackThreat a;
  a.method = AttackMethod::msd;
  a.spec = specs.front();
  a.union_specs = std::move(specs);
  return Threat{std::move(name), std::move(a)};
}

Threat Threat::weather(std::string name, PerturbSpec spec) { return Threat{std::move(name), spec}; }

std::string method_name(AttackMethod m) {
  switch (m) {
    case AttackMethod::pgd: return "pgd";
    case AttackMethod::fgsm: return "fgsm";
    case AttackMethod::msd: return "msd";
    case AttackMethod::random_search: return "random_search";
  }
  return "?";
}

AttackMethod parse_method(const std::string& s) {
  if (s == "pgd") return AttackMethod::pgd;
  if (s == "fgsm") return AttackMethod::fgsm;
  if (s == "msd") return AttackMethod::msd;
  if (s == "random_search" || s == "random-search") return AttackMethod::random_search;
  fail(Errc::invalid_params, "unknown attack method '" + s + "'");
}

std::string Threat::describe() const {
  if (is_clean()) return "clean";
  if (is_weather()) return std::get<PerturbSpec>(kind).describe();
  const auto& a = std::get<AttackThreat>(kind);
  std::string s = method_name(a.method) + ":";
  if (a.method == AttackMethod::msd) {
    for (std::size_t i = 0; i < a.union_specs.size(); ++i) s += (i ? "|" : "") + a.union_specs[i].describe();
  } else {
    s += a.spec.describe();
  }
  if (a.method == AttackMethod::random_search) s += ":q=" + std::to_string(a.queries);
  if (!a.transfer_source.empty()) s += ":from=" + a.transfer_source;
  return s;
}

Tensor apply_threat(const Threat& threat, const Classifier& target, const Tensor& x, std::span<const int> labels,
                    std::span<const std::size_t> indices, std::uint64_t seed) {
  if (threat.is_clean()) return x;
  if (threat.is_weather()) return apply_weather(x, std::get<PerturbSpec>(threat.kind), indices);
  const auto& a = std::get<AttackThreat>(threat.kind);
  AttackSpec spec = a.spec;
  spec.seed = seed;
  switch (a.method) {
    case AttackMethod::pgd: return pgd(target, x, labels, spec);
    case AttackMethod::fgsm: return fgsm(target, x, labels, spec.epsilon);
    case AttackMethod::random_search: return random_search_attack(target, x, labels, spec, a.queries);
    case AttackMethod::msd: {
      std::vector<AttackSpec> specs = a.union_specs.empty() ? std::vector<AttackSpec>{a.spec} : a.union_specs;
      for (auto& s : specs) s.seed = seed;
      return msd_perturb(target, x, labels, specs);
    }
  }
  fail(Errc::invalid_params, "unhandled attack method");
}

}  // namespace more
