// Central-difference gradient probes. These are the reference the reverse
// passes are judged against, so they stay deliberately dumb: perturb one
// element, re-run the whole function, divide.
#pragma once

#include <cmath>
#include <functional>

#include "odesr/tensor.hpp"

namespace odesr {

// d loss / d x[i] by central differences. `loss` must be a pure function of
// its argument.
template <typename Real>
Tensor<Real> finite_difference_gradient(
    const std::function<Real(const Tensor<Real>&)>& loss,
    const Tensor<Real>& x, Real step) {
  Tensor<Real> g(x.shape());
  Tensor<Real> probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const Real v = x.data()[i];
    probe.data()[i] = v + step;
    const Real up = loss(probe);
    probe.data()[i] = v - step;
    const Real down = loss(probe);
    probe.data()[i] = v;
    g.data()[i] = (up - down) / (Real(2) * step);
  }
  return g;
}

// max_i |a_i - b_i| / max(|a_i|, |b_i|, floor). The floor keeps near-zero
// entries from blowing up the relative error.
template <typename Real>
Real max_rel_error(const Tensor<Real>& a, const Tensor<Real>& b, Real floor) {
  Real worst = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const Real av = std::abs(a.data()[i]), bv = std::abs(b.data()[i]);
    const Real denom = std::max(std::max(av, bv), floor);
    worst = std::max(worst, std::abs(a.data()[i] - b.data()[i]) / denom);
  }
  return worst;
}

}  // namespace odesr
