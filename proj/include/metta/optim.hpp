#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "metta/errors.hpp"
#include "metta/tensor.hpp"

namespace metta {

/// Heavy-ball SGD state: v <- momentum * v + g; p <- p - lr * v.
struct OptimizerState {
  float learning_rate = 0.01f;
  float momentum = 0.0f;
  std::vector<Tensor> velocity;  // aligned with the parameter list, created on first step

  OptimizerState() = default;
  OptimizerState(float lr, float mom) : learning_rate(lr), momentum(mom) {
    if (!(lr >= 0.0f)) throw ValueError("learning rate must be non-negative");
    if (!(mom >= 0.0f && mom < 1.0f)) throw ValueError("momentum must lie in [0, 1)");
  }
};

inline void sgd_step(std::span<Tensor> params, std::span<const Tensor> grads, OptimizerState& state) {
  if (params.size() != grads.size()) {
    throw ShapeError("sgd_step: " + std::to_string(params.size()) + " parameters but " +
                     std::to_string(grads.size()) + " gradients");
  }
  if (state.velocity.empty()) {
    state.velocity.reserve(params.size());
    for (const Tensor& p : params) state.velocity.emplace_back(p.shape());
  }
  if (state.velocity.size() != params.size()) throw ShapeError("sgd_step: optimizer state tracks a different parameter list");
  for (std::size_t i = 0; i < params.size(); ++i) {
    require_shape(grads[i], params[i].shape(), "sgd_step gradient");
    require_shape(state.velocity[i], params[i].shape(), "sgd_step velocity");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params[i].data();
    auto v = state.velocity[i].data();
    auto g = grads[i].data();
    for (std::size_t j = 0; j < p.size(); ++j) {
      v[j] = state.momentum * v[j] + g[j];
      p[j] = p[j] - state.learning_rate * v[j];
    }
  }
}

}  // namespace metta
