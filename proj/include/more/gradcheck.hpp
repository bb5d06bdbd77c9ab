#pragma once

#include <functional>

#include "more/tensor.hpp"

namespace more {

using ScalarFn = std::function<double(const Tensor&)>;

/// Central-difference gradient (f(x+h·eᵢ) − f(x−h·eᵢ)) / 2h per coordinate,
/// with the difference taken in double precision.
Tensor finite_diff_gradient(const ScalarFn& f, const Tensor& x, float h);

/// max_i |a_i − b_i| / max(max_i |b_i|, floor).
double max_relative_error(const Tensor& a, const Tensor& b, double floor = 1e-6);

}  // namespace more
