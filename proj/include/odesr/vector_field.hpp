// Right-hand sides for the integrator: f(u, t) over 4-D tensor states, with
// an exact evaluation counter. Parameters are exposed as raw tensor pointers
// so gradient backends can watch them on a tape of their choosing.
#pragma once

#include <functional>
#include <utility>
#include <vector>

#include "odesr/errors.hpp"
#include "odesr/tape.hpp"
#include "odesr/tensor.hpp"

namespace odesr {

template <typename Real>
class VectorField {
 public:
  virtual ~VectorField() = default;

  // One call = one evaluation, no exceptions to the ledger.
  Tensor<Real> operator()(Tape<Real>* tape, const Tensor<Real>& u, double t) {
    ++nfe_;
    Tensor<Real> out = eval_impl(tape, u, t);
    if (!(out.shape() == u.shape())) {
      throw config_error("vector field output shape " + out.shape().str() +
                         " does not match state shape " + u.shape().str());
    }
    return out;
  }

  virtual std::vector<Tensor<Real>*> parameters() { return {}; }

  std::size_t param_count() {
    std::size_t n = 0;
    for (const Tensor<Real>* p : parameters()) n += p->size();
    return n;
  }

  long long nfe() const { return nfe_; }
  void reset_nfe() { nfe_ = 0; }

 protected:
  virtual Tensor<Real> eval_impl(Tape<Real>* tape, const Tensor<Real>& u,
                                 double t) = 0;

 private:
  long long nfe_ = 0;
};

// Field defined by a closure; parameter tensors stay owned by the caller and
// are captured by pointer both here and inside the closure.
template <typename Real>
class CallbackField : public VectorField<Real> {
 public:
  using Fn =
      std::function<Tensor<Real>(Tape<Real>*, const Tensor<Real>&, double)>;

  explicit CallbackField(Fn fn, std::vector<Tensor<Real>*> params = {})
      : fn_(std::move(fn)), params_(std::move(params)) {}

  std::vector<Tensor<Real>*> parameters() override { return params_; }

 protected:
  Tensor<Real> eval_impl(Tape<Real>* tape, const Tensor<Real>& u,
                         double t) override {
    return fn_(tape, u, t);
  }

 private:
  Fn fn_;
  std::vector<Tensor<Real>*> params_;
};

// Flattens per-parameter gradients into one vector, in parameters() order.
template <typename Real>
std::vector<Real> gather_param_grads(Tape<Real>& tape,
                                     const std::vector<Tensor<Real>*>& params) {
  std::vector<Real> flat;
  for (const Tensor<Real>* p : params) {
    Tensor<Real> g = tape.gradient(p->node);
    flat.insert(flat.end(), g.data(), g.data() + g.size());
  }
  return flat;
}

}  // namespace odesr
