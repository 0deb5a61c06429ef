// Three gradient backends for losses containing an ODE integral:
//   adjoint      - constant-memory continuous adjoint; re-integrates the
//                  state backward jointly with the co-state. Can diverge.
//   discrete     - reverse accumulation through every recorded solver stage;
//                  no backward field evaluations, memory grows with steps.
//   checkpointed - forward stores only accepted-step states; each step is
//                  rematerialized on a fresh tape during the reverse walk.
//                  Gradients identical to discrete at one-step memory cost.
// Plus the watchdog that turns backward-evaluation blowups into flags
// instead of hung runs.
#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "odesr/dopri5.hpp"
#include "odesr/errors.hpp"
#include "odesr/ops.hpp"
#include "odesr/tape.hpp"
#include "odesr/tensor.hpp"
#include "odesr/vector_field.hpp"

namespace odesr {

template <typename Real>
struct GradientReport {
  std::string method;           // adjoint | discrete | checkpointed
  std::vector<Real> gradients;  // flat, field.parameters() order; empty when diverged
  Tensor<Real> state_grad;      // dL/d(initial state); empty when diverged
  long long forward_nfe = 0;
  long long backward_nfe = 0;
  bool diverged = false;
  double wall_ms = 0.0;
  std::size_t peak_saved_values = 0;  // activation-memory ledger
};

// One line of the metrics stream.
template <typename Real>
std::string to_jsonl(const GradientReport<Real>& r) {
  nlohmann::ordered_json j;
  j["method"] = r.method;
  j["forward_nfe"] = r.forward_nfe;
  j["backward_nfe"] = r.backward_nfe;
  j["diverged"] = r.diverged;
  j["wall_ms"] = r.wall_ms;
  return j.dump();
}

// Builds the scalar loss from the taped final state. The closure may put
// additional structure (and additional watched parameters) on the tape; the
// backends only promise gradients for the field's own parameters plus the
// initial state.
template <typename Real>
using LossClosure =
    std::function<Tensor<Real>(Tape<Real>&, const Tensor<Real>&)>;

namespace detail {

class WallTimer {
 public:
  WallTimer() : start_(std::chrono::steady_clock::now()) {}
  double ms() const {
    return std::chrono::duration<double, std::milli>(
               std::chrono::steady_clock::now() - start_)
        .count();
  }

 private:
  std::chrono::steady_clock::time_point start_;
};

template <typename Real>
void detach_all(const std::vector<Tensor<Real>*>& ps) {
  for (Tensor<Real>* p : ps) p->node = kDetached;
}

template <typename Real>
void watch_all(Tape<Real>& tape, const std::vector<Tensor<Real>*>& ps) {
  for (Tensor<Real>* p : ps) {
    p->node = kDetached;
    tape.watch(*p);
  }
}

}  // namespace detail

template <typename Real>
struct VjpResult {
  Tensor<Real> value;            // f(u, t)
  Tensor<Real> wrt_state;        // a' J_x products: a^T df/dx
  std::vector<Real> wrt_params;  // a^T df/dtheta, flattened
  std::size_t saved_values = 0;  // tape footprint of the single evaluation
};

// Both vector-Jacobian products from one taped evaluation of f. Exactly one
// field evaluation per call.
template <typename Real>
VjpResult<Real> vjp(VectorField<Real>& field, const Tensor<Real>& u, double t,
                    const Tensor<Real>& a) {
  if (!(a.shape() == u.shape())) {
    throw config_error("vjp seed shape " + a.shape().str() +
                       " does not match state shape " + u.shape().str());
  }
  Tape<Real> tape;
  Tensor<Real> x = u;
  x.node = kDetached;
  tape.watch(x);
  auto params = field.parameters();
  detail::watch_all(tape, params);

  Tensor<Real> y = field(&tape, x, t);
  check_finite(y, "vjp field evaluation");

  VjpResult<Real> out;
  out.value = y;
  out.value.node = kDetached;
  out.saved_values = tape.saved_values();
  if (y.node == kDetached) {
    // Field ignored the tape (constant w.r.t. state and parameters).
    out.wrt_state = Tensor<Real>(u.shape());
    out.wrt_params.assign(field.param_count(), Real(0));
  } else {
    tape.backward(y.node, a);
    out.wrt_state = tape.gradient(x.node);
    out.wrt_params = gather_param_grads(tape, params);
  }
  detail::detach_all(params);
  return out;
}

// Augmented backward state: the trajectory re-integrated in reverse, the
// co-state, and the running parameter-gradient integral.
template <typename Real>
struct AdjointPack {
  Tensor<Real> x;
  Tensor<Real> a;
  std::vector<Real> g;
};

// Integrates the augmented system in s = t_final - t, so the solver always
// runs forward. Dynamics per evaluation (one field eval through vjp):
//   dx/ds = -f(x, t)
//   da/ds = +a^T df/dx
//   dg/ds = +a^T df/dtheta
template <typename Real>
struct AdjointOdeSystem {
  using State = AdjointPack<Real>;

  VectorField<Real>& field;
  double t_end;  // forward-time upper bound the reversal pivots around
  std::size_t peak_saved = 0;

  State eval(const State& p, double s) {
    VjpResult<Real> r = vjp(field, p.x, t_end - s, p.a);
    peak_saved = std::max(peak_saved, r.saved_values);
    State d;
    d.x = Tensor<Real>(p.x.shape());
    for (std::size_t i = 0; i < d.x.size(); ++i) {
      d.x.data()[i] = -r.value.data()[i];
    }
    d.a = r.wrt_state;
    d.g = std::move(r.wrt_params);
    return d;
  }

  State combine(std::span<const double> c,
                std::span<const State* const> xs) {
    return combine_raw(c, xs);
  }

  State combine_raw(std::span<const double> c,
                    std::span<const State* const> xs) {
    State out;
    out.x = Tensor<Real>(xs[0]->x.shape());
    out.a = Tensor<Real>(xs[0]->a.shape());
    out.g.assign(xs[0]->g.size(), Real(0));
    for (std::size_t j = 0; j < c.size(); ++j) {
      const Real cj = static_cast<Real>(c[j]);
      if (cj == Real(0)) continue;
      const State& s = *xs[j];
      for (std::size_t i = 0; i < out.x.size(); ++i) {
        out.x.data()[i] += cj * s.x.data()[i];
      }
      for (std::size_t i = 0; i < out.a.size(); ++i) {
        out.a.data()[i] += cj * s.a.data()[i];
      }
      for (std::size_t i = 0; i < out.g.size(); ++i) {
        out.g[i] += cj * s.g[i];
      }
    }
    return out;
  }

  // One norm across all three blocks: single solver, uniform tolerance.
  double error_norm(const State& err, const State& old_s, const State& new_s,
                    const SolverConfig& cfg) const {
    double acc = 0;
    std::size_t n = 0;
    auto fold = [&](const Real* e, const Real* a0, const Real* a1,
                    std::size_t m) {
      for (std::size_t i = 0; i < m; ++i) {
        const double scale =
            cfg.atol + cfg.rtol * std::max(std::abs(double(a0[i])),
                                           std::abs(double(a1[i])));
        const double r = double(e[i]) / scale;
        acc += r * r;
      }
      n += m;
    };
    fold(err.x.data(), old_s.x.data(), new_s.x.data(), err.x.size());
    fold(err.a.data(), old_s.a.data(), new_s.a.data(), err.a.size());
    fold(err.g.data(), old_s.g.data(), new_s.g.data(), err.g.size());
    return std::sqrt(acc / double(n));
  }

  std::size_t mark() const { return 0; }
  void rollback(std::size_t) {}

  static bool finite(const State& s) {
    if (!s.x.all_finite() || !s.a.all_finite()) return false;
    for (Real v : s.g) {
      if (!std::isfinite(double(v))) return false;
    }
    return true;
  }
};

// Backward half of the adjoint method, starting from a known final state.
// Budget exhaustion in the backward solve is the divergence signal: the
// report comes back flagged, without gradients, and without an exception.
template <typename Real>
GradientReport<Real> adjoint_backward(VectorField<Real>& field,
                                      const Tensor<Real>& state_at_end,
                                      const Tensor<Real>& loss_grad_at_end,
                                      const SolverConfig& cfg,
                                      long long backward_budget) {
  detail::WallTimer timer;
  GradientReport<Real> rep;
  rep.method = "adjoint";

  AdjointOdeSystem<Real> sys{field, cfg.t_final};
  AdjointPack<Real> p0;
  p0.x = state_at_end;
  p0.x.node = kDetached;
  p0.a = loss_grad_at_end;
  p0.a.node = kDetached;
  p0.g.assign(field.param_count(), Real(0));

  SolverConfig back = cfg;
  back.t0 = 0.0;
  back.t_final = cfg.t_final - cfg.t0;
  back.initial_step = 0.0;
  back.max_nfe = backward_budget;

  const long long before = field.nfe();
  auto res = integrate_system<Real>(sys, p0, back, false);
  rep.backward_nfe = field.nfe() - before;
  rep.peak_saved_values = sys.peak_saved;
  rep.diverged = res.budget_exhausted;
  if (!rep.diverged) {
    rep.gradients = res.final_state.g;
    rep.state_grad = res.final_state.a;
  }
  rep.wall_ms = timer.ms();
  return rep;
}

// Full adjoint gradient: forward solve, then the augmented backward solve.
template <typename Real>
GradientReport<Real> adjoint_gradient(VectorField<Real>& field,
                                      const Tensor<Real>& u0,
                                      const Tensor<Real>& loss_grad_at_end,
                                      const SolverConfig& cfg,
                                      long long backward_budget = 100000) {
  detail::WallTimer timer;
  const long long before = field.nfe();
  SolveResult<Real> fwd = integrate(field, u0, cfg);
  if (fwd.budget_exhausted) {
    throw numeric_error("adjoint_gradient: forward evaluation budget exhausted");
  }
  GradientReport<Real> rep = adjoint_backward(
      field, fwd.final_state, loss_grad_at_end, cfg, backward_budget);
  rep.forward_nfe = fwd.nfe_used;
  rep.backward_nfe = field.nfe() - before - fwd.nfe_used;
  rep.wall_ms = timer.ms();
  return rep;
}

// Reverse accumulation through the recorded forward integration. Step sizes
// enter the graph as constants (the accept/reject controller is not
// differentiated); rejected attempts are truncated off the tape.
template <typename Real>
GradientReport<Real> discrete_gradient(VectorField<Real>& field,
                                       const Tensor<Real>& u0,
                                       const LossClosure<Real>& loss,
                                       const SolverConfig& cfg) {
  detail::WallTimer timer;
  GradientReport<Real> rep;
  rep.method = "discrete";

  Tape<Real> tape;
  Tensor<Real> state = u0;
  state.node = kDetached;
  tape.watch(state);
  auto params = field.parameters();
  detail::watch_all(tape, params);

  SolveResult<Real> fwd = integrate(field, state, cfg, false, &tape);
  if (fwd.budget_exhausted) {
    detail::detach_all(params);
    throw numeric_error("discrete_gradient: forward evaluation budget exhausted");
  }
  rep.forward_nfe = fwd.nfe_used;

  Tensor<Real> l = loss(tape, fwd.final_state);
  tape.backward(l.node);
  rep.gradients = gather_param_grads(tape, params);
  rep.state_grad = tape.gradient(state.node);
  rep.backward_nfe = 0;
  rep.peak_saved_values = tape.saved_values();
  detail::detach_all(params);
  rep.wall_ms = timer.ms();
  return rep;
}

// Checkpointed reverse walk from a precomputed seed (dL/d final state),
// given a forward solve captured with checkpoints. Each accepted step is
// replayed on its own tape. The final step is replayed in full (7
// evaluations); earlier steps need only k1..k6 because the 5th-order update
// never uses k7, whose value is the next step's k1 anyway. Recomputation
// ledger: 6 * accepted + 1.
template <typename Real>
GradientReport<Real> checkpointed_backward(VectorField<Real>& field,
                                           const SolveResult<Real>& fwd,
                                           const Tensor<Real>& loss_grad_at_end,
                                           const SolverConfig& cfg) {
  (void)cfg;  // trajectory data lives in fwd; kept for signature symmetry
  detail::WallTimer timer;
  GradientReport<Real> rep;
  rep.method = "checkpointed";
  const std::size_t n_steps = fwd.accepted.size();
  if (fwd.checkpoints.size() != n_steps + 1) {
    throw state_error("checkpointed_backward needs a checkpoint-captured solve");
  }
  auto params = field.parameters();

  std::vector<Real> gtheta(field.param_count(), Real(0));
  Tensor<Real> seed = loss_grad_at_end;
  seed.node = kDetached;
  const long long before = field.nfe();

  for (std::size_t k = n_steps; k-- > 0;) {
    const auto [t_k, h_k] = fwd.accepted[k];
    Tape<Real> tape;
    Tensor<Real> uk = fwd.checkpoints[k];
    uk.node = kDetached;
    tape.watch(uk);
    detail::watch_all(tape, params);
    TensorOdeSystem<Real> sys{field, &tape};

    Tensor<Real> u_next;
    if (k + 1 == n_steps) {
      StepOutput<Tensor<Real>> step =
          dopri5_step<Real>(sys, uk, t_k, h_k, nullptr);
      u_next = step.u5;
    } else {
      u_next = detail::dopri5_stages<Real>(sys, uk, t_k, h_k, nullptr).u5;
    }
    tape.backward(u_next.node, seed);

    std::vector<Real> g = gather_param_grads(tape, params);
    for (std::size_t i = 0; i < gtheta.size(); ++i) gtheta[i] += g[i];
    seed = tape.gradient(uk.node);
    rep.peak_saved_values = std::max(rep.peak_saved_values, tape.saved_values());
    detail::detach_all(params);
  }

  rep.backward_nfe = field.nfe() - before;
  rep.gradients = std::move(gtheta);
  rep.state_grad = seed;
  rep.wall_ms = timer.ms();
  return rep;
}

// Convenience entry point: forward solve with checkpoint capture, loss on a
// small tape, then the reverse walk above.
template <typename Real>
GradientReport<Real> checkpointed_gradient(VectorField<Real>& field,
                                           const Tensor<Real>& u0,
                                           const LossClosure<Real>& loss,
                                           const SolverConfig& cfg) {
  detail::WallTimer timer;
  SolveResult<Real> fwd = integrate(field, u0, cfg, true);
  if (fwd.budget_exhausted) {
    throw numeric_error(
        "checkpointed_gradient: forward evaluation budget exhausted");
  }

  Tensor<Real> seed;
  std::size_t loss_saved = 0;
  {
    Tape<Real> ltape;
    Tensor<Real> uT = fwd.final_state;
    uT.node = kDetached;
    ltape.watch(uT);
    Tensor<Real> l = loss(ltape, uT);
    ltape.backward(l.node);
    seed = ltape.gradient(uT.node);
    loss_saved = ltape.saved_values();
  }

  GradientReport<Real> rep = checkpointed_backward(field, fwd, seed, cfg);
  rep.forward_nfe = fwd.nfe_used;
  rep.peak_saved_values = std::max(rep.peak_saved_values, loss_saved);
  rep.wall_ms = timer.ms();
  return rep;
}

// ---------------------------------------------------------------------------
// Divergence watchdog

struct WatchdogFlag {
  long long batch_id = 0;
  long long backward_nfe = 0;
  double ratio = 0.0;      // vs the median of prior batches (0 if no prior)
  bool over_budget = false;
};

struct WatchdogSummary {
  std::size_t observed = 0;
  double median_nfe = 0.0;
  std::vector<WatchdogFlag> flags;
};

// Flags any batch whose backward NFE exceeds ratio_threshold times the
// median of the batches before it, or the absolute budget, or that reported
// divergence outright.
class DivergenceWatchdog {
 public:
  explicit DivergenceWatchdog(double ratio_threshold = 50.0,
                              long long budget = 100000)
      : ratio_threshold_(ratio_threshold), budget_(budget) {}

  void observe(long long batch_id, long long backward_nfe, bool diverged) {
    double ratio = 0.0;
    if (!history_.empty()) {
      const double med = median_();
      if (med > 0) ratio = double(backward_nfe) / med;
    }
    const bool over_budget = backward_nfe > budget_;
    if (diverged || over_budget ||
        (ratio > ratio_threshold_ && !history_.empty())) {
      flags_.push_back({batch_id, backward_nfe, ratio, over_budget});
    }
    history_.push_back(backward_nfe);
  }

  WatchdogSummary summary() const {
    WatchdogSummary s;
    s.observed = history_.size();
    s.median_nfe = history_.empty() ? 0.0 : median_();
    s.flags = flags_;
    return s;
  }

 private:
  double median_() const {
    std::vector<long long> v = history_;
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    if (n == 0) return 0.0;
    return n % 2 ? double(v[n / 2]) : 0.5 * (double(v[n / 2 - 1]) + double(v[n / 2]));
  }

  double ratio_threshold_;
  long long budget_;
  std::vector<long long> history_;
  std::vector<WatchdogFlag> flags_;
};

// Stream form: aggregate a finished run's reports, batch id = index.
template <typename Real>
WatchdogSummary divergence_watchdog(const std::vector<GradientReport<Real>>& reports,
                                    double ratio_threshold = 50.0,
                                    long long budget = 100000) {
  DivergenceWatchdog dog(ratio_threshold, budget);
  for (std::size_t i = 0; i < reports.size(); ++i) {
    dog.observe(static_cast<long long>(i), reports[i].backward_nfe,
                reports[i].diverged);
  }
  return dog.summary();
}

}  // namespace odesr
