#include "more/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "more/error.hpp"

namespace more {

Tensor finite_diff_gradient(const ScalarFn& f, const Tensor& x, float h) {
  require(h > 0.0f, Errc::invalid_params, "finite difference step must be positive");
  Tensor grad(x.shape());
  Tensor probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const float orig = x[i];
    probe[i] = orig + h;
    const double up = f(probe);
    probe[i] = orig - h;
    const double down = f(probe);
    probe[i] = orig;
    // Use the step actually realized in f32 arithmetic.
    const double width = static_cast<double>(orig + h) - static_cast<double>(orig - h);
    grad[i] = static_cast<float>((up - down) / width);
  }
  return grad;
}

double max_relative_error(const Tensor& a, const Tensor& b, double floor) {
  require(a.shape() == b.shape(), Errc::shape_mismatch, "max_relative_error shape mismatch");
  double scale = floor, diff = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    scale = std::max(scale, static_cast<double>(std::fabs(b[i])));
    diff = std::max(diff, std::fabs(static_cast<double>(a[i]) - b[i]));
  }
  return diff / scale;
}

}  // namespace more
