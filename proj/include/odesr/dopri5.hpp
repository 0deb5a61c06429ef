// Adaptive Dormand-Prince 5(4) integrator with FSAL, exact evaluation
// accounting, and optional per-step checkpoint capture. The stepping core is
// generic over a System so the same code integrates plain tensor states and
// the augmented state used by the continuous-adjoint backend.
//
// A System provides:
//   using State = ...;                       default-constructible, copyable
//   State eval(const State& u, double t);    RHS; must count one evaluation
//   State combine(span<double> c, span<const State* const> xs);  on tape
//   State combine_raw(...);                  values only (error estimate)
//   double error_norm(err, u_old, u_new, const SolverConfig&);
//   std::size_t mark(); void rollback(std::size_t);   rejected-step cleanup
//   static bool finite(const State&);
#pragma once

#include <array>
#include <cmath>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "odesr/errors.hpp"
#include "odesr/ops.hpp"
#include "odesr/tensor.hpp"
#include "odesr/vector_field.hpp"

namespace odesr {

struct SolverConfig {
  double rtol = 1e-7;
  double atol = 1e-9;
  double t0 = 0.0;
  double t_final = 1.0;
  double initial_step = 0.0;  // <= 0: start with the whole interval
  double safety = 0.9;
  double min_factor = 0.2;
  double max_factor = 10.0;
  long long max_nfe = 1'000'000;

  void validate() const {
    if (!(rtol > 0) || !(atol > 0)) {
      throw config_error("solver tolerances must be positive");
    }
    if (!(t_final > t0)) {
      throw config_error("solver requires t_final > t0");
    }
    if (max_nfe < 1) throw config_error("solver max_nfe must be >= 1");
    if (!(safety > 0) || !(min_factor > 0) || !(max_factor < 1e6) ||
        !(min_factor < 1.0) || !(max_factor > 1.0)) {
      throw config_error("solver step-controller factors out of range");
    }
  }
};

// Dormand-Prince 5(4) coefficients as 64-bit rationals. e = b - bhat is the
// embedded error row.
struct Dopri5Tableau {
  static constexpr double c[7] = {0.0,       1.0 / 5,   3.0 / 10, 4.0 / 5,
                                  8.0 / 9,   1.0,       1.0};
  static constexpr double a[7][6] = {
      {0, 0, 0, 0, 0, 0},
      {1.0 / 5, 0, 0, 0, 0, 0},
      {3.0 / 40, 9.0 / 40, 0, 0, 0, 0},
      {44.0 / 45, -56.0 / 15, 32.0 / 9, 0, 0, 0},
      {19372.0 / 6561, -25360.0 / 2187, 64448.0 / 6561, -212.0 / 729, 0, 0},
      {9017.0 / 3168, -355.0 / 33, 46732.0 / 5247, 49.0 / 176,
       -5103.0 / 18656, 0},
      {35.0 / 384, 0, 500.0 / 1113, 125.0 / 192, -2187.0 / 6784, 11.0 / 84}};
  static constexpr double b[7] = {35.0 / 384,      0,          500.0 / 1113,
                                  125.0 / 192,     -2187.0 / 6784,
                                  11.0 / 84,       0};
  static constexpr double bhat[7] = {5179.0 / 57600,    0,
                                     7571.0 / 16695,    393.0 / 640,
                                     -92097.0 / 339200, 187.0 / 2100,
                                     1.0 / 40};
  static constexpr double e[7] = {71.0 / 57600,      0,
                                  -71.0 / 16695,     71.0 / 1920,
                                  -17253.0 / 339200, 22.0 / 525,
                                  -1.0 / 40};
};

template <typename Real, typename State>
struct BasicSolveResult {
  State final_state;
  std::vector<std::pair<double, double>> accepted;  // (t_k, h_k)
  long long rejected = 0;
  long long nfe_used = 0;
  std::vector<State> checkpoints;  // u0 plus one per accepted step, if captured
  bool budget_exhausted = false;
};

template <typename Real>
using SolveResult = BasicSolveResult<Real, Tensor<Real>>;

// RMS of err_i / (atol + rtol * max(|u_old,i|, |u_new,i|)); accepted iff <= 1.
template <typename Real>
double error_norm(const Tensor<Real>& err, const Tensor<Real>& u_old,
                  const Tensor<Real>& u_new, const SolverConfig& cfg) {
  if (!(err.shape() == u_old.shape()) || !(err.shape() == u_new.shape())) {
    throw config_error("error_norm shape mismatch");
  }
  double acc = 0;
  const std::size_t n = err.size();
  for (std::size_t i = 0; i < n; ++i) {
    const double scale =
        cfg.atol + cfg.rtol * std::max(std::abs(double(u_old.data()[i])),
                                       std::abs(double(u_new.data()[i])));
    const double r = double(err.data()[i]) / scale;
    acc += r * r;
  }
  return std::sqrt(acc / double(n));
}

// h * clamp(safety * norm^(-1/5), min_factor, max_factor); growth is capped,
// and a zero norm takes the cap directly.
inline double next_step_size(double h, double norm, const SolverConfig& cfg) {
  if (norm <= 0) return h * cfg.max_factor;
  double factor = cfg.safety * std::pow(norm, -0.2);
  factor = std::min(std::max(factor, cfg.min_factor), cfg.max_factor);
  return h * factor;
}

// Plain tensor states driven by a VectorField, optionally on a tape (the
// discrete gradient backend records the whole integration).
template <typename Real>
struct TensorOdeSystem {
  using State = Tensor<Real>;

  VectorField<Real>& field;
  Tape<Real>* tape = nullptr;

  State eval(const State& u, double t) { return field(tape, u, t); }

  State combine(std::span<const double> c,
                std::span<const State* const> xs) {
    return combine_on(tape, c, xs);
  }
  State combine_raw(std::span<const double> c,
                    std::span<const State* const> xs) {
    return combine_on(nullptr, c, xs);
  }

  double error_norm(const State& err, const State& u_old, const State& u_new,
                    const SolverConfig& cfg) const {
    return odesr::error_norm(err, u_old, u_new, cfg);
  }

  std::size_t mark() const { return tape ? tape->node_count() : 0; }
  void rollback(std::size_t m) {
    if (tape) tape->truncate(m);
  }

  static bool finite(const State& s) { return s.all_finite(); }

 private:
  static State combine_on(Tape<Real>* tp, std::span<const double> c,
                          std::span<const State* const> xs) {
    std::vector<Real> cs(c.size());
    for (std::size_t i = 0; i < c.size(); ++i) cs[i] = static_cast<Real>(c[i]);
    return lincomb<Real>(tp, cs, xs);
  }
};

template <typename State>
struct StepOutput {
  State u5;     // 5th-order solution at t + h
  State error;  // embedded 4th/5th-order difference (values only)
  State k7;     // f(u5, t + h), reusable as the next step's k1 (FSAL)
};

namespace detail {

template <typename State>
struct StageSet {
  std::array<State, 6> k;  // k1..k6; the 5th-order solution needs no k7
  State u5;
};

// Shared stage builder: the checkpointed backend replays steps through this
// exact code path so its arithmetic matches the recording pass bit for bit.
// Evaluations: 5, plus 1 when k1 is not supplied.
template <typename Real, typename Sys>
StageSet<typename Sys::State> dopri5_stages(Sys& sys,
                                            const typename Sys::State& u,
                                            double t, double h,
                                            const typename Sys::State* k1) {
  using State = typename Sys::State;
  using T = Dopri5Tableau;
  if (!(h > 0)) throw config_error("dopri5_step requires h > 0");

  auto stage_check = [&](const State& s) {
    if (!Sys::finite(s)) {
      throw numeric_error("non-finite stage at t=" + std::to_string(t) +
                          " h=" + std::to_string(h));
    }
  };

  StageSet<State> st;
  st.k[0] = k1 ? *k1 : sys.eval(u, t);
  stage_check(st.k[0]);

  std::vector<double> cs;
  std::vector<const State*> xs;
  for (int i = 1; i < 6; ++i) {
    cs.assign(1, 1.0);
    xs.assign(1, &u);
    for (int j = 0; j < i; ++j) {
      if (T::a[i][j] == 0.0) continue;
      cs.push_back(h * T::a[i][j]);
      xs.push_back(&st.k[j]);
    }
    State input = sys.combine(cs, xs);
    st.k[i] = sys.eval(input, t + T::c[i] * h);
    stage_check(st.k[i]);
  }

  cs.assign(1, 1.0);
  xs.assign(1, &u);
  for (int j = 0; j < 6; ++j) {
    if (T::b[j] == 0.0) continue;
    cs.push_back(h * T::b[j]);
    xs.push_back(&st.k[j]);
  }
  st.u5 = sys.combine(cs, xs);
  stage_check(st.u5);
  return st;
}

}  // namespace detail

// One attempted step. 7 stage evaluations; 6 when k1 is supplied. Stage
// products route through the system's combine so a recording tape sees them.
template <typename Real, typename Sys>
StepOutput<typename Sys::State> dopri5_step(Sys& sys,
                                            const typename Sys::State& u,
                                            double t, double h,
                                            const typename Sys::State* k1) {
  using State = typename Sys::State;
  using T = Dopri5Tableau;
  detail::StageSet<State> st = detail::dopri5_stages<Real>(sys, u, t, h, k1);

  StepOutput<State> out;
  out.u5 = st.u5;
  out.k7 = sys.eval(out.u5, t + h);
  if (!Sys::finite(out.k7)) {
    throw numeric_error("non-finite stage at t=" + std::to_string(t) +
                        " h=" + std::to_string(h));
  }

  std::vector<double> cs;
  std::vector<const State*> xs;
  for (int j = 0; j < 6; ++j) {
    if (T::e[j] == 0.0) continue;
    cs.push_back(h * T::e[j]);
    xs.push_back(&st.k[j]);
  }
  cs.push_back(h * T::e[6]);
  xs.push_back(&out.k7);
  out.error = sys.combine_raw(cs, xs);
  return out;
}

// Adaptive loop. NFE ledger: 6 * (accepted + rejected) + 1 under FSAL.
// Budget exhaustion is an outcome, not an error; the partial result carries
// the flag. Rejected steps are rolled back off any recording tape.
template <typename Real, typename Sys>
BasicSolveResult<Real, typename Sys::State> integrate_system(
    Sys& sys, const typename Sys::State& u0, const SolverConfig& cfg,
    bool capture_checkpoints = false) {
  using State = typename Sys::State;
  cfg.validate();
  if (!Sys::finite(u0)) throw numeric_error("integrate: initial state not finite");

  BasicSolveResult<Real, State> res;
  double t = cfg.t0;
  double h = cfg.initial_step > 0 ? cfg.initial_step : (cfg.t_final - cfg.t0);
  h = std::min(h, cfg.t_final - cfg.t0);
  if (t + h == t) throw numeric_error("integrate: initial step underflow");

  State u = u0;
  if (capture_checkpoints) res.checkpoints.push_back(u);

  State k1;
  bool have_k1 = false;
  long long used = 0;

  while (t < cfg.t_final) {
    const bool final_step = t + h >= cfg.t_final;
    if (final_step) h = cfg.t_final - t;

    if (used + (have_k1 ? 6 : 7) > cfg.max_nfe) {
      res.budget_exhausted = true;
      break;
    }
    if (!have_k1) {
      k1 = sys.eval(u, t);
      ++used;
      have_k1 = true;
    }

    const std::size_t mark = sys.mark();
    StepOutput<State> step = dopri5_step<Real>(sys, u, t, h, &k1);
    used += 6;
    const double norm = sys.error_norm(step.error, u, step.u5, cfg);

    if (norm <= 1.0) {
      res.accepted.emplace_back(t, h);
      t = final_step ? cfg.t_final : t + h;
      u = step.u5;
      k1 = step.k7;
      if (capture_checkpoints) res.checkpoints.push_back(u);
    } else {
      ++res.rejected;
      sys.rollback(mark);
    }
    h = next_step_size(h, norm, cfg);
  }

  res.final_state = u;
  res.nfe_used = used;
  return res;
}

// Tensor-level entry point. Passing a tape records every accepted stage for
// reverse accumulation; checkpoint capture never alters the trajectory.
template <typename Real>
SolveResult<Real> integrate(VectorField<Real>& field, const Tensor<Real>& u0,
                            const SolverConfig& cfg,
                            bool capture_checkpoints = false,
                            Tape<Real>* tape = nullptr) {
  TensorOdeSystem<Real> sys{field, tape};
  return integrate_system<Real>(sys, u0, cfg, capture_checkpoints);
}

}  // namespace odesr
