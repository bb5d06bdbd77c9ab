#include "more/optim.hpp"

#include "more/error.hpp"

namespace more {

void sgd_step(std::span<Tensor* const> params, std::span<const Tensor> grads, float lr, float momentum,
              SgdState& state) {
  require(params.size() == grads.size(), Errc::shape_mismatch, "sgd_step: parameter and gradient counts differ");
  require(lr >= 0.0f, Errc::invalid_params, "sgd_step: negative learning rate");
  if (state.velocity.empty()) {
    for (const Tensor* p : params) state.velocity.emplace_back(p->shape());
  }
  require(state.velocity.size() == params.size(), Errc::shape_mismatch, "sgd_step: optimizer state size changed");
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = *params[i];
    const Tensor& g = grads[i];
    Tensor& v = state.velocity[i];
    require(p.shape() == g.shape() && v.shape() == p.shape(), Errc::shape_mismatch,
            "sgd_step: shape " + shape_string(p.shape()) + " vs gradient " + shape_string(g.shape()));
    for (std::size_t j = 0; j < p.size(); ++j) {
      v[j] = momentum * v[j] + g[j];
      p[j] = p[j] - lr * v[j];
    }
  }
}

}  // namespace more
