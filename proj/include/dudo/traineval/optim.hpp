// SPDX-License-Identifier: Apache-2.0
//
// Adam with bias correction folded into the step size.

#pragma once

#include <cmath>
#include <vector>

#include "dudo/diffcore/tape.hpp"

namespace dudo {

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.5;
  double beta2 = 0.999;
  double eps = 1e-8;
  /// Rescale the global gradient norm to at most this value; 0 disables.
  double clip_norm = 0.0;
};

template <class T>
struct AdamState {
  std::size_t step = 0;
  std::vector<Tensor<T>> m, v;
};

/// Global L2 norm over every gradient in the store.
template <class T>
double grad_norm(const ParamStore<T>& params) {
  double s = 0.0;
  for (std::size_t p = 0; p < params.size(); ++p)
    for (T g : params.grad_at(p).data()) s += static_cast<double>(g) * static_cast<double>(g);
  return std::sqrt(s);
}

/// One update from the gradients held in `params`:
///   m <- b1 m + (1-b1) g,  v <- b2 v + (1-b2) g^2,
///   p <- p - lr sqrt(1-b2^t)/(1-b1^t) * m / (sqrt(v) + eps).
template <class T>
void adam_step(ParamStore<T>& params, AdamState<T>& state, const AdamConfig& cfg) {
  if (state.m.empty()) {
    for (std::size_t p = 0; p < params.size(); ++p) {
      state.m.emplace_back(params.value_at(p).shape());
      state.v.emplace_back(params.value_at(p).shape());
    }
  }
  if (state.m.size() != params.size()) throw ShapeError("adam_step: optimizer state does not match parameters");
  for (std::size_t p = 0; p < params.size(); ++p) {
    if (state.m[p].shape() != params.value_at(p).shape()) {
      throw ShapeError("adam_step: moment shape mismatch for '" + params.names()[p] + "'");
    }
  }
  double gscale = 1.0;
  if (cfg.clip_norm > 0.0) {
    const double n = grad_norm(params);
    if (n > cfg.clip_norm) gscale = cfg.clip_norm / n;
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const T lr_t = static_cast<T>(cfg.lr * std::sqrt(1.0 - std::pow(cfg.beta2, t)) / (1.0 - std::pow(cfg.beta1, t)));
  const T b1 = static_cast<T>(cfg.beta1), b2 = static_cast<T>(cfg.beta2), eps = static_cast<T>(cfg.eps);
  for (std::size_t p = 0; p < params.size(); ++p) {
    auto w = params.value_at(p).data();
    auto g = params.grad_at(p).data();
    auto m = state.m[p].data();
    auto v = state.v[p].data();
    for (std::size_t i = 0; i < w.size(); ++i) {
      const T gi = g[i] * static_cast<T>(gscale);
      m[i] = b1 * m[i] + (T(1) - b1) * gi;
      v[i] = b2 * v[i] + (T(1) - b2) * gi * gi;
      w[i] -= lr_t * m[i] / (std::sqrt(v[i]) + eps);
    }
  }
}

}  // namespace dudo
