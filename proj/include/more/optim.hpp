#pragma once

#include <span>
#include <vector>

#include "more/tensor.hpp"

namespace more {

/// Momentum buffers for sgd_step, one per parameter in call order.
struct SgdState {
  std::vector<Tensor> velocity;
};

/// v ← momentum·v + g;  p ← p − lr·v.
void sgd_step(std::span<Tensor* const> params, std::span<const Tensor> grads, float lr, float momentum,
              SgdState& state);

}  // namespace more
