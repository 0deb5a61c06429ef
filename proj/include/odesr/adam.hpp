// Adam with bias correction. The step is skipped wholesale when any gradient
// entry is non-finite, leaving parameters and moments bit-identical, so a
// diverged batch cannot poison the optimizer state.
#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "odesr/errors.hpp"
#include "odesr/tensor.hpp"

namespace odesr {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename Real>
struct AdamState {
  std::vector<Tensor<Real>> m;
  std::vector<Tensor<Real>> v;
  long long t = 0;

  static AdamState zeros_like(const std::vector<Tensor<Real>*>& params) {
    AdamState s;
    s.m.reserve(params.size());
    s.v.reserve(params.size());
    for (const Tensor<Real>* p : params) {
      s.m.emplace_back(p->shape());
      s.v.emplace_back(p->shape());
    }
    return s;
  }
};

// Applies one update in place. Returns false (touching nothing) when any
// gradient entry is non-finite.
template <typename Real>
bool adam_step(const std::vector<Tensor<Real>*>& params,
               const std::vector<Tensor<Real>>& grads, AdamState<Real>& state,
               double lr, const AdamConfig& cfg = {}) {
  if (params.size() != grads.size() || params.size() != state.m.size() ||
      params.size() != state.v.size()) {
    throw config_error("adam_step: parameter/gradient/state count mismatch");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i]->shape() != grads[i].shape() ||
        params[i]->shape() != state.m[i].shape() ||
        params[i]->shape() != state.v[i].shape()) {
      throw config_error("adam_step: shape mismatch at parameter " +
                         std::to_string(i));
    }
  }
  for (const Tensor<Real>& g : grads) {
    for (std::size_t k = 0; k < g.size(); ++k) {
      if (!std::isfinite(static_cast<double>(g.data()[k]))) return false;
    }
  }
  ++state.t;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Real* p = params[i]->data();
    const Real* g = grads[i].data();
    Real* m = state.m[i].data();
    Real* v = state.v[i].data();
    for (std::size_t k = 0; k < params[i]->size(); ++k) {
      const double gk = static_cast<double>(g[k]);
      const double mk = cfg.beta1 * static_cast<double>(m[k]) +
                        (1.0 - cfg.beta1) * gk;
      const double vk = cfg.beta2 * static_cast<double>(v[k]) +
                        (1.0 - cfg.beta2) * gk * gk;
      m[k] = static_cast<Real>(mk);
      v[k] = static_cast<Real>(vk);
      const double update = (mk / bc1) / (std::sqrt(vk / bc2) + cfg.eps);
      p[k] = static_cast<Real>(static_cast<double>(p[k]) - lr * update);
    }
  }
  return true;
}

}  // namespace odesr
