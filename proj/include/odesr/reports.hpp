// Analysis artifacts on top of trained models: the solver-cost difficulty
// report (which images make the flow work hardest, and whether extra RRDB
// depth helps exactly those) and the backward-stability benchmark comparing
// the three gradient methods on a stiffness sweep.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <limits>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "odesr/dopri5.hpp"
#include "odesr/errors.hpp"
#include "odesr/image.hpp"
#include "odesr/metrics.hpp"
#include "odesr/ops.hpp"
#include "odesr/sensitivity.hpp"
#include "odesr/sr_model.hpp"
#include "odesr/train.hpp"
#include "odesr/vector_field.hpp"

namespace odesr {

// Most frequent value; ties break toward the smaller count so the mapping is
// deterministic.
inline long long mode_of(const std::vector<long long>& xs) {
  if (xs.empty()) throw config_error("mode_of: empty input");
  std::map<long long, int> counts;
  for (long long x : xs) ++counts[x];
  long long best = xs[0];
  int best_n = 0;
  for (const auto& [value, n] : counts) {
    if (n > best_n) {  // map iteration is ascending, so ties keep the smaller
      best = value;
      best_n = n;
    }
  }
  return best;
}

inline std::string nfe_bucket(long long steps, long long mode) {
  if (steps < mode) return "low";
  if (steps > mode) return "high";
  return "medium";
}

struct NfeDifficultyRow {
  std::string image_id;
  long long steps = 0;
  std::string bucket;
  std::vector<double> psnrs;  // one per comparison model, in input order
};

struct NfeDifficultyReport {
  std::vector<NfeDifficultyRow> rows;
  long long mode_steps = 0;
  bool degenerate = false;  // fewer than 3 distinct step counts
  std::string warning;      // non-empty when degenerate
  std::map<std::string, int> bucket_counts;
  std::map<std::string, std::vector<double>> bucket_mean_psnr;
};

// Pure bucket arithmetic over already-measured step counts and PSNR tables,
// so the classification logic is testable without any model in the loop.
inline NfeDifficultyReport bucket_by_steps(
    const std::vector<std::string>& ids, const std::vector<long long>& steps,
    const std::vector<std::vector<double>>& psnr_table) {
  if (ids.size() != steps.size() || ids.size() != psnr_table.size()) {
    throw config_error("bucket_by_steps: length mismatch");
  }
  if (ids.empty()) throw config_error("bucket_by_steps: empty input");
  NfeDifficultyReport rep;
  rep.mode_steps = mode_of(steps);
  std::vector<long long> distinct = steps;
  std::sort(distinct.begin(), distinct.end());
  distinct.erase(std::unique(distinct.begin(), distinct.end()),
                 distinct.end());
  if (distinct.size() < 3) {
    rep.degenerate = true;
    rep.warning = "only " + std::to_string(distinct.size()) +
                  " distinct step count(s); report degenerates to the "
                  "available buckets";
  }
  const std::size_t models = psnr_table[0].size();
  std::map<std::string, std::vector<double>> sums;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (psnr_table[i].size() != models) {
      throw config_error("bucket_by_steps: ragged psnr table");
    }
    NfeDifficultyRow row;
    row.image_id = ids[i];
    row.steps = steps[i];
    row.bucket = nfe_bucket(steps[i], rep.mode_steps);
    row.psnrs = psnr_table[i];
    ++rep.bucket_counts[row.bucket];
    auto& s = sums[row.bucket];
    s.resize(models, 0.0);
    for (std::size_t m = 0; m < models; ++m) s[m] += psnr_table[i][m];
    rep.rows.push_back(std::move(row));
  }
  for (auto& [bucket, s] : sums) {
    const double n = static_cast<double>(rep.bucket_counts[bucket]);
    for (double& v : s) v /= n;
    rep.bucket_mean_psnr[bucket] = s;
  }
  return rep;
}

namespace detail {

template <typename Real>
double whole_image_psnr(Generator<Real>& gen, const ImagePair<Real>& pair,
                        long long* steps_out = nullptr) {
  auto fr = gen.forward(pair.lr);
  clip01(fr.sr);
  if (steps_out) {
    *steps_out =
        fr.solve ? static_cast<long long>(fr.solve->accepted.size()) : 0;
  }
  return psnr(fr.sr, pair.hr);
}

}  // namespace detail

// Measures per-image solver-step counts of the flow model, buckets the images
// by count, and tabulates each comparison model's PSNR so depth-vs-difficulty
// trends can be read off per bucket. CSV columns:
//   image_id,steps,bucket,psnr_b1,psnr_b2,...
template <typename Real>
NfeDifficultyReport nfe_difficulty_report(
    Generator<Real>& ode_gen, std::vector<Generator<Real>*> rrdb_gens,
    const std::vector<ImagePair<Real>>& pairs, const std::string& csv_path) {
  if (ode_gen.config().core != CoreKind::ode) {
    throw config_error("nfe_difficulty_report: first model must be the flow");
  }
  if (rrdb_gens.size() < 2) {
    throw config_error(
        "nfe_difficulty_report: need at least two comparison models");
  }
  for (std::size_t m = 1; m < rrdb_gens.size(); ++m) {
    if (rrdb_gens[m]->config().rrdb_blocks <=
        rrdb_gens[m - 1]->config().rrdb_blocks) {
      throw config_error(
          "nfe_difficulty_report: comparison models must increase in depth");
    }
  }
  if (pairs.empty()) throw config_error("nfe_difficulty_report: no images");

  std::vector<std::string> ids;
  std::vector<long long> steps;
  std::vector<std::vector<double>> table;
  for (const ImagePair<Real>& pair : pairs) {
    long long s = 0;
    detail::whole_image_psnr(ode_gen, pair, &s);
    ids.push_back(pair.source_id);
    steps.push_back(s);
    std::vector<double> row;
    for (Generator<Real>* g : rrdb_gens) {
      row.push_back(detail::whole_image_psnr(*g, pair));
    }
    table.push_back(std::move(row));
  }
  NfeDifficultyReport rep = bucket_by_steps(ids, steps, table);

  std::ofstream out(csv_path);
  if (!out) throw io_error("cannot open " + csv_path);
  out << "image_id,steps,bucket";
  for (std::size_t m = 0; m < rrdb_gens.size(); ++m) {
    out << ",psnr_b" << rrdb_gens[m]->config().rrdb_blocks;
  }
  out << '\n';
  for (const NfeDifficultyRow& row : rep.rows) {
    out << row.image_id << ',' << row.steps << ',' << row.bucket;
    for (double p : row.psnrs) out << ',' << format_sig9(p);
    out << '\n';
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Backward-stability benchmark

// Scalar benchmark family whose forward dynamics are exactly x' = -lambda*x.
// The high-frequency term is gated behind relu(x - gate) with the gate above
// the whole trajectory (x decays from 1, gate at 1.2), so it contributes
// nothing forward and its coefficient theta has a true gradient of exactly
// zero. Solving backward in time re-grows the state exponentially, and the
// absolute-tolerance floor seeds enough error for the reconstructed state to
// overshoot into the gate band, where the wiggle makes the augmented system
// arbitrarily stiff: the adjoint's backward pass exhausts its budget while
// tape-based methods, which never re-solve, stay exact.
template <typename Real>
class ContractionProbe {
 public:
  explicit ContractionProbe(double lambda, double nu = 1e4, double gate = 1.2)
      : lambda_(lambda), nu_(nu), gate_(gate) {
    field_ = std::make_unique<CallbackField<Real>>(
        [this](Tape<Real>* t, const Tensor<Real>& u, double) {
          Tensor<Real> shifted =
              add<Real>(t, u, Tensor<Real>(u.shape(), Real(-gate_)));
          Tensor<Real> lr = leaky_relu<Real>(t, shifted, Real(0.2));
          // relu(z) = (lrelu(z) - 0.2 z) / 0.8
          Tensor<Real> relu_s = scale<Real>(
              t, add<Real>(t, lr, scale<Real>(t, shifted, Real(-0.2))),
              Real(1.25));
          Tensor<Real> wig = mul_scalar<Real>(
              t, sin_wave<Real>(t, relu_s, Real(nu_)), theta_);
          return add<Real>(t, scale<Real>(t, u, Real(-lambda_)), wig);
        },
        std::vector<Tensor<Real>*>{&theta_});
  }

  CallbackField<Real>& field() { return *field_; }
  Tensor<Real>& theta() { return theta_; }
  double lambda() const { return lambda_; }

 private:
  double lambda_, nu_, gate_;
  Tensor<Real> theta_ = Tensor<Real>::scalar(Real(1));
  std::unique_ptr<CallbackField<Real>> field_;
};

struct StabilityScenario {
  double lambda = 0.0;
  double rtol = 1e-3;
  double atol = 1e-6;
  long long budget = 10000;  // backward NFE budget for the adjoint
  double x0 = 1.0;
  double t_final = 1.0;
};

struct StabilityRow {
  double lambda = 0.0;
  double rtol = 0.0;
  long long budget = 0;
  std::string method;
  long long backward_nfe = 0;
  bool diverged = false;
  // |dL/dtheta - central difference|; NaN when the method returned nothing
  double grad_err_vs_fd = std::numeric_limits<double>::quiet_NaN();
};

struct StabilityTable {
  std::vector<StabilityRow> rows;
  // rtol -> smallest lambda where the adjoint diverged (absent if it never did)
  std::map<double, double> first_adjoint_divergence;

  std::string summary() const {
    std::ostringstream os;
    if (first_adjoint_divergence.empty()) {
      os << "adjoint never diverged on the swept scenarios\n";
      return os.str();
    }
    for (const auto& [rtol, lambda] : first_adjoint_divergence) {
      os << "rtol " << format_sig9(rtol) << ": adjoint first diverges at "
         << "lambda " << format_sig9(lambda)
         << "; tape-based methods stay exact on the whole sweep\n";
    }
    return os.str();
  }
};

namespace detail {

// dL/dtheta for L = x(T) by central differences, bumping theta in place.
template <typename Real>
double probe_fd_theta(ContractionProbe<Real>& probe, const Tensor<Real>& x0,
                      const SolverConfig& cfg, double h = 1e-4) {
  Real& th = probe.theta().data()[0];
  const Real saved = th;
  th = saved + Real(h);
  const double up =
      static_cast<double>(integrate(probe.field(), x0, cfg).final_state.item());
  th = saved - Real(h);
  const double dn =
      static_cast<double>(integrate(probe.field(), x0, cfg).final_state.item());
  th = saved;
  return (up - dn) / (2.0 * h);
}

}  // namespace detail

// Runs all three gradient methods on each scenario with loss L = x(T).
// Divergence is data, not an error: the adjoint's budget exhaustion lands in
// the table as a flagged row. Long-format CSV:
//   lambda,rtol,budget,method,backward_nfe,diverged,grad_err_vs_fd
inline StabilityTable stability_bench(
    const std::vector<StabilityScenario>& scenarios,
    const std::string& csv_path) {
  if (scenarios.empty()) throw config_error("stability_bench: no scenarios");
  StabilityTable table;
  std::ofstream out(csv_path);
  if (!out) throw io_error("cannot open " + csv_path);
  out << "lambda,rtol,budget,method,backward_nfe,diverged,grad_err_vs_fd\n";

  for (const StabilityScenario& sc : scenarios) {
    SolverConfig cfg;
    cfg.rtol = sc.rtol;
    cfg.atol = sc.atol;
    cfg.t0 = 0.0;
    cfg.t_final = sc.t_final;

    const Tensor<double> x0 = Tensor<double>::scalar(sc.x0);
    const Tensor<double> ones = Tensor<double>::scalar(1.0);
    const LossClosure<double> loss = [](Tape<double>& t,
                                        const Tensor<double>& xT) {
      return reduce_sum(&t, xT);
    };

    ContractionProbe<double> fd_probe(sc.lambda);
    const double fd = detail::probe_fd_theta(fd_probe, x0, cfg);

    for (const char* method : {"adjoint", "discrete", "checkpointed"}) {
      ContractionProbe<double> probe(sc.lambda);
      GradientReport<double> rep;
      if (std::string(method) == "adjoint") {
        rep = adjoint_gradient(probe.field(), x0, ones, cfg, sc.budget);
      } else if (std::string(method) == "discrete") {
        rep = discrete_gradient(probe.field(), x0, loss, cfg);
      } else {
        rep = checkpointed_gradient(probe.field(), x0, loss, cfg);
      }
      StabilityRow row;
      row.lambda = sc.lambda;
      row.rtol = sc.rtol;
      row.budget = sc.budget;
      row.method = method;
      row.backward_nfe = rep.backward_nfe;
      row.diverged = rep.diverged;
      if (!rep.diverged && !rep.gradients.empty()) {
        row.grad_err_vs_fd = std::abs(rep.gradients[0] - fd);
      }
      if (row.method == "adjoint" && row.diverged) {
        auto it = table.first_adjoint_divergence.find(sc.rtol);
        if (it == table.first_adjoint_divergence.end() ||
            sc.lambda < it->second) {
          table.first_adjoint_divergence[sc.rtol] = sc.lambda;
        }
      }
      out << format_sig9(row.lambda) << ',' << format_sig9(row.rtol) << ','
          << row.budget << ',' << row.method << ',' << row.backward_nfe << ','
          << (row.diverged ? 1 : 0) << ','
          << format_sig9(row.grad_err_vs_fd) << '\n';
      table.rows.push_back(std::move(row));
    }
  }
  return table;
}

}  // namespace odesr
