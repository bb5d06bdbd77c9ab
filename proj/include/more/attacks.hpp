#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "more/model.hpp"
#include "more/tensor.hpp"

namespace more {

enum class Norm { l2, linf };

std::string norm_name(Norm n);
Norm parse_norm(const std::string& s);

/// An ℓp-ball threat: radius, iteration budget and step size.
struct AttackSpec {
  Norm norm = Norm::linf;
  float epsilon = 8.0f / 255.0f;
  int steps = 20;
  float step_size = 0.01f;
  bool random_start = true;
  std::uint64_t seed = 0;

  // Hyperparameters used for CIFAR-scale runs: 20 steps, step ε/5 for ℓ2
  // and 0.01 for ℓ∞.
  static AttackSpec preset_l2(float epsilon = 1.0f);
  static AttackSpec preset_linf(float epsilon = 8.0f / 255.0f);
  // Desk-scale MNIST radii: ℓ2 1.5, ℓ∞ 0.2.
  static AttackSpec desk_l2();
  static AttackSpec desk_linf();

  void validate() const;
  std::string describe() const;
};

/// Projects each row of delta (leading dimension = batch) onto the ε-ball.
/// ℓ∞ clamps coordinates; ℓ2 rescales rows whose norm exceeds ε.
Tensor project(const Tensor& delta, Norm norm, float epsilon);

/// Adjusts delta so that x + delta stays in [0, 1].
Tensor clip_to_pixel_range(const Tensor& x, const Tensor& delta);

/// Per-row norm of (a − b).
std::vector<double> perturbation_norms(const Tensor& a, const Tensor& b, Norm norm);

/// Gradient of the mean cross-entropy with respect to the input batch.
Tensor input_gradient(const Classifier& model, const Tensor& x, std::span<const int> labels);

Tensor fgsm(const Classifier& model, const Tensor& x, std::span<const int> labels, float epsilon);

Tensor pgd(const Classifier& model, const Tensor& x, std::span<const int> labels, const AttackSpec& spec);

/// Per example, the index of the candidate with the highest loss; earlier
/// candidates win ties. losses[c][b] is candidate c's loss on example b.
std::vector<std::size_t> worst_case_choice(std::span<const std::vector<float>> losses);

/// Row b of the result is row b of candidates[pick[b]].
Tensor gather_rows(std::span<const Tensor> candidates, std::span<const std::size_t> pick);

/// Multi steepest descent: one trajectory that, per step and per example,
/// keeps the norm whose projected steepest-ascent candidate has the highest
/// loss. All specs must share the step count.
Tensor msd_perturb(const Classifier& model, const Tensor& x, std::span<const int> labels,
                   std::span<const AttackSpec> specs);

/// Gradient-free search over seeded square-window proposals. The clean input
/// is the first of `queries` evaluations; the best-loss candidate per example
/// is returned.
Tensor random_search_attack(const Classifier& model, const Tensor& x, std::span<const int> labels,
                            const AttackSpec& spec, int queries);

}  // namespace more
