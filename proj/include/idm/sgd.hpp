#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "idm/errors.hpp"
#include "idm/tensor.hpp"

namespace idm {

/// SGD with heavy-ball momentum and L2 weight decay:
///   v <- momentum * v + (g + weight_decay * p)
///   p <- p - lr * v
template <typename T>
struct SgdState {
  T lr = T(0.01);
  T momentum = T(0.9);
  T weight_decay = T(0.0005);
  std::vector<Tensor<T>> buffers;  // one per parameter, created on first step

  SgdState() = default;
  SgdState(T lr_, T momentum_, T weight_decay_)
      : lr(lr_), momentum(momentum_), weight_decay(weight_decay_) {}
};

template <typename T>
void sgd_update(std::vector<Tensor<T>>& params, const std::vector<Tensor<T>>& grads,
                SgdState<T>& state) {
  if (grads.size() != params.size()) {
    throw DimensionError("sgd_update: " + std::to_string(grads.size()) + " gradients for " +
                         std::to_string(params.size()) + " parameters");
  }
  if (state.buffers.empty()) {
    state.buffers.reserve(params.size());
    for (const auto& p : params) state.buffers.push_back(Tensor<T>::zeros(p.shape()));
  }
  if (state.buffers.size() != params.size()) {
    throw DimensionError("sgd_update: optimizer state tracks a different parameter count");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor<T>& p = params[i];
    const Tensor<T>& g = grads[i];
    Tensor<T>& v = state.buffers[i];
    if (g.shape() != p.shape() || v.shape() != p.shape()) {
      throw DimensionError("sgd_update: shape mismatch for parameter " + std::to_string(i));
    }
    T* pd = p.data();
    T* vd = v.data();
    const T* gd = g.data();
    for (std::size_t k = 0; k < p.size(); ++k) {
      vd[k] = state.momentum * vd[k] + (gd[k] + state.weight_decay * pd[k]);
      pd[k] -= state.lr * vd[k];
    }
  }
}

}  // namespace idm
