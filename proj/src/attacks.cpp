#include "more/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "more/error.hpp"
#include "more/rng.hpp"

namespace more {

namespace {

std::size_t row_size(const Tensor& t) {
  require(t.rank() >= 1 && t.dim(0) > 0, Errc::shape_mismatch, "expected a non-empty batch");
  return t.size() / t.dim(0);
}

float sign(float v) { return v > 0.0f ? 1.0f : (v < 0.0f ? -1.0f : 0.0f); }

void require_gradients(const Classifier& model) {
  require(model.differentiable(), Errc::gradient_unavailable, "white-box attack on a subject without gradients");
}

// Largest factor ≤ epsilon / norm whose f32 rescale lands inside the ball.
void rescale_into_l2_ball(std::span<float> row, float epsilon) {
  const double norm = l2_norm(row);
  if (norm <= epsilon) return;
  std::vector<float> orig(row.begin(), row.end());
  float factor = static_cast<float>(static_cast<double>(epsilon) / norm);
  for (;;) {
    for (std::size_t i = 0; i < row.size(); ++i) row[i] = orig[i] * factor;
    if (l2_norm(row) <= epsilon) return;
    factor = std::nextafter(factor, 0.0f);
  }
}

// One projected steepest-ascent step from x_adv along grad.
Tensor ascend(const Tensor& x, const Tensor& x_adv, const Tensor& grad, const AttackSpec& spec) {
  const std::size_t d = row_size(x), batch = x.dim(0);
  const float eps = spec.epsilon, step = spec.step_size;
  Tensor out(x.shape());
  if (spec.norm == Norm::linf) {
    for (std::size_t i = 0; i < out.size(); ++i) {
      float v = x_adv[i] + step * sign(grad[i]);
      v = std::min(std::max(v, x[i] - eps), x[i] + eps);
      out[i] = std::clamp(v, 0.0f, 1.0f);
    }
    return out;
  }
  Tensor delta(x.shape());
  for (std::size_t b = 0; b < batch; ++b) {
    const auto g = grad.data().subspan(b * d, d);
    const double gn = l2_norm(g);
    const float inv = gn > 0.0 ? static_cast<float>(1.0 / gn) : 0.0f;
    for (std::size_t j = 0; j < d; ++j) {
      const std::size_t i = b * d + j;
      delta[i] = (x_adv[i] + step * (g[j] * inv)) - x[i];
    }
  }
  delta = project(delta, Norm::l2, eps);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::clamp(x[i] + delta[i], 0.0f, 1.0f);
  return out;
}

Tensor random_start(const Tensor& x, const AttackSpec& spec) {
  const std::size_t d = row_size(x), batch = x.dim(0);
  Tensor delta(x.shape());
  for (std::size_t b = 0; b < batch; ++b) {
    Rng rng(derive_seed(spec.seed, b));
    auto row = delta.data().subspan(b * d, d);
    if (spec.norm == Norm::linf) {
      for (float& v : row) v = rng.uniform(-spec.epsilon, spec.epsilon);
    } else {
      for (float& v : row) v = rng.normal();
      const double n = l2_norm(row);
      const double radius = spec.epsilon * std::pow(static_cast<double>(rng.uniform()), 1.0 / static_cast<double>(d));
      const float f = n > 0.0 ? static_cast<float>(radius / n) : 0.0f;
      for (float& v : row) v *= f;
    }
  }
  delta = project(delta, spec.norm, spec.epsilon);
  Tensor out(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::clamp(x[i] + delta[i], 0.0f, 1.0f);
  return out;
}

void require_finite_gradient(const Tensor& g) {
  require(g.all_finite(), Errc::non_finite_gradient, "input gradient contains NaN/Inf");
}

}  // namespace

std::string norm_name(Norm n) { return n == Norm::l2 ? "l2" : "linf"; }

Norm parse_norm(const std::string& s) {
  if (s == "l2") return Norm::l2;
  if (s == "linf" || s == "inf") return Norm::linf;
  fail(Errc::invalid_params, "unknown norm '" + s + "'");
}

AttackSpec AttackSpec::preset_l2(float epsilon) {
  return AttackSpec{Norm::l2, epsilon, 20, epsilon / 5.0f, true, 0};
}

AttackSpec AttackSpec::preset_linf(float epsilon) { return AttackSpec{Norm::linf, epsilon, 20, 0.01f, true, 0}; }

AttackSpec AttackSpec::desk_l2() { return preset_l2(1.5f); }

AttackSpec AttackSpec::desk_linf() { return preset_linf(0.2f); }

void AttackSpec::validate() const {
  require(epsilon > 0.0f && std::isfinite(epsilon), Errc::invalid_params, "attack epsilon must be > 0");
  require(steps >= 1, Errc::invalid_params, "attack steps must be >= 1");
  require(step_size > 0.0f && std::isfinite(step_size), Errc::invalid_params, "attack step size must be > 0");
}

std::string AttackSpec::describe() const {
  std::ostringstream os;
  os.precision(9);
  os << norm_name(norm) << ":eps=" << epsilon << ":steps=" << steps << ":step=" << step_size
     << ":rs=" << (random_start ? 1 : 0) << ":seed=" << seed;
  return os.str();
}

Tensor project(const Tensor& delta, Norm norm, float epsilon) {
  require(epsilon > 0.0f, Errc::invalid_params, "projection radius must be > 0");
  Tensor out = delta;
  if (norm == Norm::linf) {
    for (float& v : out.data()) v = std::clamp(v, -epsilon, epsilon);
    return out;
  }
  const std::size_t d = row_size(out);
  for (std::size_t b = 0; b < out.dim(0); ++b) rescale_into_l2_ball(out.data().subspan(b * d, d), epsilon);
  return out;
}

Tensor clip_to_pixel_range(const Tensor& x, const Tensor& delta) {
  require(x.shape() == delta.shape(), Errc::shape_mismatch, "clip_to_pixel_range shape mismatch");
  Tensor out(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::clamp(x[i] + delta[i], 0.0f, 1.0f) - x[i];
  return out;
}

std::vector<double> perturbation_norms(const Tensor& a, const Tensor& b, Norm norm) {
  require(a.shape() == b.shape(), Errc::shape_mismatch, "perturbation_norms shape mismatch");
  const std::size_t d = row_size(a);
  std::vector<double> out(a.dim(0));
  std::vector<float> diff(d);
  for (std::size_t r = 0; r < out.size(); ++r) {
    for (std::size_t j = 0; j < d; ++j) diff[j] = a[r * d + j] - b[r * d + j];
    out[r] = norm == Norm::l2 ? l2_norm(diff) : static_cast<double>(linf_norm(diff));
  }
  return out;
}

Tensor input_gradient(const Classifier& model, const Tensor& x, std::span<const int> labels) {
  require_gradients(model);
  Graph g;
  Var xv = g.variable(x);
  Var loss = cross_entropy(model.logits(g, xv), labels);
  Tensor grad = std::move(g.backward(loss, std::span<const Var>(&xv, 1))[0]);
  require_finite_gradient(grad);
  return grad;
}

Tensor fgsm(const Classifier& model, const Tensor& x, std::span<const int> labels, float epsilon) {
  require(epsilon > 0.0f, Errc::invalid_params, "fgsm epsilon must be > 0");
  const Tensor grad = input_gradient(model, x, labels);
  Tensor out(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::clamp(x[i] + epsilon * sign(grad[i]), 0.0f, 1.0f);
  return out;
}

Tensor pgd(const Classifier& model, const Tensor& x, std::span<const int> labels, const AttackSpec& spec) {
  spec.validate();
  require_gradients(model);
  Tensor x_adv = spec.random_start ? random_start(x, spec) : x;
  for (int step = 0; step < spec.steps; ++step) {
    const Tensor grad = input_gradient(model, x_adv, labels);
    x_adv = ascend(x, x_adv, grad, spec);
  }
  return x_adv;
}

std::vector<std::size_t> worst_case_choice(std::span<const std::vector<float>> losses) {
  require(!losses.empty(), Errc::invalid_params, "worst_case_choice needs at least one candidate");
  std::vector<std::size_t> pick(losses[0].size(), 0);
  for (std::size_t c = 1; c < losses.size(); ++c) {
    require(losses[c].size() == pick.size(), Errc::shape_mismatch, "candidate loss lists differ in length");
    for (std::size_t b = 0; b < pick.size(); ++b)
      if (losses[c][b] > losses[pick[b]][b]) pick[b] = c;
  }
  return pick;
}

Tensor gather_rows(std::span<const Tensor> candidates, std::span<const std::size_t> pick) {
  require(!candidates.empty(), Errc::invalid_params, "gather_rows needs candidates");
  const Tensor& first = candidates[0];
  const std::size_t d = row_size(first);
  require(pick.size() == first.dim(0), Errc::shape_mismatch, "one choice per row required");
  Tensor out(first.shape());
  for (std::size_t b = 0; b < pick.size(); ++b) {
    const Tensor& src = candidates[pick[b]];
    std::copy_n(src.ptr() + b * d, d, out.ptr() + b * d);
  }
  return out;
}

Tensor msd_perturb(const Classifier& model, const Tensor& x, std::span<const int> labels,
                   std::span<const AttackSpec> specs) {
  require(!specs.empty(), Errc::invalid_params, "msd needs at least one attack spec");
  for (const auto& s : specs) {
    s.validate();
    require(s.steps == specs[0].steps, Errc::invalid_params, "msd specs must share the step count");
  }
  require_gradients(model);
  Tensor x_adv = specs[0].random_start ? random_start(x, specs[0]) : x;
  std::vector<Tensor> candidates(specs.size());
  std::vector<std::vector<float>> losses(specs.size());
  for (int step = 0; step < specs[0].steps; ++step) {
    const Tensor grad = input_gradient(model, x_adv, labels);
    for (std::size_t s = 0; s < specs.size(); ++s) {
      candidates[s] = ascend(x, x_adv, grad, specs[s]);
      losses[s] = specs.size() > 1 ? cross_entropy_per_example(model.predict_logits(candidates[s]), labels)
                                   : std::vector<float>(x.dim(0), 0.0f);
    }
    x_adv = gather_rows(candidates, worst_case_choice(losses));
  }
  return x_adv;
}

Tensor random_search_attack(const Classifier& model, const Tensor& x, std::span<const int> labels,
                            const AttackSpec& spec, int queries) {
  spec.validate();
  require(queries >= 1, Errc::invalid_params, "random search needs at least one query");
  require(x.rank() == 4, Errc::shape_mismatch, "random search expects B×C×H×W input");
  const std::size_t batch = x.dim(0), channels = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t d = channels * h * w, area = h * w;

  Tensor best = x;
  std::vector<float> best_loss = cross_entropy_per_example(model.predict_logits(best), labels);
  std::vector<Rng> rngs;
  rngs.reserve(batch);
  for (std::size_t b = 0; b < batch; ++b) rngs.emplace_back(derive_seed(spec.seed, b, 0x5eac));

  for (int q = 1; q < queries; ++q) {
    // Window covers a shrinking fraction of the image area.
    const double frac = 0.1 * std::pow(0.5, std::floor(8.0 * q / std::max(queries, 2)));
    const std::size_t side = std::clamp<std::size_t>(
        static_cast<std::size_t>(std::lround(std::sqrt(frac * static_cast<double>(area)))), 1, std::max(h, w));
    const std::size_t sh = std::min(side, h), sw = std::min(h == 1 ? side * side : side, w);

    Tensor cand = best;
    for (std::size_t b = 0; b < batch; ++b) {
      Rng& rng = rngs[b];
      const std::size_t top = static_cast<std::size_t>(rng.below(h - sh + 1));
      const std::size_t left = static_cast<std::size_t>(rng.below(w - sw + 1));
      float* row = cand.ptr() + b * d;
      const float* x0 = x.ptr() + b * d;
      std::vector<float> delta(d);
      for (std::size_t i = 0; i < d; ++i) delta[i] = row[i] - x0[i];
      if (spec.norm == Norm::linf) {
        for (std::size_t c = 0; c < channels; ++c) {
          const float v = rng.bernoulli(0.5f) ? spec.epsilon : -spec.epsilon;
          for (std::size_t r = top; r < top + sh; ++r)
            for (std::size_t col = left; col < left + sw; ++col) delta[(c * h + r) * w + col] = v;
        }
      } else {
        const float scale = spec.epsilon / std::sqrt(static_cast<float>(channels * sh * sw));
        for (std::size_t c = 0; c < channels; ++c)
          for (std::size_t r = top; r < top + sh; ++r)
            for (std::size_t col = left; col < left + sw; ++col) delta[(c * h + r) * w + col] += scale * rng.normal();
      }
      Tensor dt({1, d}, std::move(delta));
      dt = project(dt, spec.norm, spec.epsilon);
      for (std::size_t i = 0; i < d; ++i) row[i] = std::clamp(x0[i] + dt[i], 0.0f, 1.0f);
    }
    const std::vector<float> loss = cross_entropy_per_example(model.predict_logits(cand), labels);
    for (std::size_t b = 0; b < batch; ++b) {
      if (loss[b] > best_loss[b]) {
        best_loss[b] = loss[b];
        std::copy_n(cand.ptr() + b * d, d, best.ptr() + b * d);
      }
    }
  }
  return best;
}

}  // namespace more
