// Training loop: shuffled patch batches, per-batch gradients through the
// configured backend, Adam updates, per-epoch validation with NFE statistics,
// and patience-driven learning-rate decay. Single-threaded and seeded, so a
// fixed config reproduces its metrics file byte for byte.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "odesr/adam.hpp"
#include "odesr/checkpoint.hpp"
#include "odesr/dataset.hpp"
#include "odesr/errors.hpp"
#include "odesr/image.hpp"
#include "odesr/metrics.hpp"
#include "odesr/rng.hpp"
#include "odesr/run_config.hpp"
#include "odesr/sensitivity.hpp"
#include "odesr/sr_model.hpp"

namespace odesr {

struct TrainConfig {
  double learning_rate = 2e-4;
  int batch_size = 16;
  int patience = 3;          // non-improving validations before an LR decay
  double lr_decay_factor = 0.5;
  double min_lr = 1e-6;      // a decay that would undershoot this stops the run
  int max_epochs = 100;
  std::uint64_t seed = 0;
  int hr_patch = 128;
  int stride = 0;            // 0 means non-overlapping (stride = hr_patch)
  bool augment = true;
  GeneratorConfig generator;

  void validate() const {
    if (!(learning_rate > 0)) throw config_error("learning_rate must be > 0");
    if (batch_size < 1) throw config_error("batch_size must be >= 1");
    if (patience < 1) throw config_error("patience must be >= 1");
    if (!(lr_decay_factor > 0 && lr_decay_factor < 1)) {
      throw config_error("lr_decay_factor must be in (0, 1)");
    }
    if (!(min_lr > 0 && min_lr < learning_rate)) {
      throw config_error("min_lr must be in (0, learning_rate)");
    }
    if (max_epochs < 1) throw config_error("max_epochs must be >= 1");
    if (hr_patch < generator.scale || hr_patch % generator.scale != 0) {
      throw config_error("hr_patch must be a positive multiple of the scale");
    }
    if (stride < 0) throw config_error("stride must be >= 0");
    generator.validate();
  }
};

inline json train_to_json(const TrainConfig& c) {
  json j;
  j["learning_rate"] = c.learning_rate;
  j["batch_size"] = c.batch_size;
  j["patience"] = c.patience;
  j["lr_decay_factor"] = c.lr_decay_factor;
  j["min_lr"] = c.min_lr;
  j["max_epochs"] = c.max_epochs;
  j["seed"] = c.seed;
  j["hr_patch"] = c.hr_patch;
  j["stride"] = c.stride;
  j["augment"] = c.augment;
  j["generator"] = generator_to_json(c.generator);
  return j;
}

inline TrainConfig train_from_json(const json& j) {
  detail::check_keys(j,
                     {"learning_rate", "batch_size", "patience",
                      "lr_decay_factor", "min_lr", "max_epochs", "seed",
                      "hr_patch", "stride", "augment", "generator"},
                     "train config");
  TrainConfig c;
  detail::read_field(j, "learning_rate", c.learning_rate);
  detail::read_field(j, "batch_size", c.batch_size);
  detail::read_field(j, "patience", c.patience);
  detail::read_field(j, "lr_decay_factor", c.lr_decay_factor);
  detail::read_field(j, "min_lr", c.min_lr);
  detail::read_field(j, "max_epochs", c.max_epochs);
  detail::read_field(j, "seed", c.seed);
  detail::read_field(j, "hr_patch", c.hr_patch);
  detail::read_field(j, "stride", c.stride);
  detail::read_field(j, "augment", c.augment);
  if (j.contains("generator")) {
    c.generator = generator_from_json(j.at("generator"));
  }
  c.validate();
  return c;
}

// One row of solver-cost accounting; psnr is NaN where it does not apply.
struct NfeRecord {
  std::string scope;  // batch | image | epoch
  std::string id;
  long long nfe = 0;
  long long solver_steps = 0;
  double psnr = std::numeric_limits<double>::quiet_NaN();
};

// Plateau-driven decay schedule. Pure bookkeeping so the policy is testable
// without running a model: `patience` consecutive non-improving observations
// decay the rate; a decay that would undershoot min_lr requests a stop.
class LrController {
 public:
  LrController(double lr, int patience, double decay, double min_lr)
      : lr_(lr), patience_(patience), decay_(decay), min_lr_(min_lr) {}

  double lr() const { return lr_; }
  double best() const { return best_; }
  int bad_epochs() const { return bad_; }

  // Returns true when training should stop.
  bool observe(double val_psnr) {
    if (val_psnr > best_) {
      best_ = val_psnr;
      bad_ = 0;
      return false;
    }
    if (++bad_ < patience_) return false;
    const double next = lr_ * decay_;
    if (next < min_lr_) return true;
    lr_ = next;
    bad_ = 0;
    return false;
  }

 private:
  double lr_;
  int patience_;
  double decay_;
  double min_lr_;
  double best_ = -std::numeric_limits<double>::infinity();
  int bad_ = 0;
};

struct ValidationResult {
  double psnr_mean = 0.0;
  double nfe_mean = 0.0;  // per-image forward NFE
  double nfe_std = 0.0;   // population std
  std::vector<NfeRecord> records;
};

namespace detail {

template <typename Real>
void clip01(Tensor<Real>& t) {
  for (std::size_t i = 0; i < t.size(); ++i) {
    t.data()[i] = std::clamp(t.data()[i], Real(0), Real(1));
  }
}

inline std::pair<double, double> mean_std(const std::vector<double>& xs) {
  if (xs.empty()) return {0.0, 0.0};
  double mean = 0;
  for (double x : xs) mean += x;
  mean /= static_cast<double>(xs.size());
  double var = 0;
  for (double x : xs) var += (x - mean) * (x - mean);
  var /= static_cast<double>(xs.size());
  return {mean, std::sqrt(var)};
}

}  // namespace detail

// Whole-image PSNR on the held-out pairs, plus the per-image solver cost
// that the difficulty report consumes. No tape: inference only.
template <typename Real>
ValidationResult validate(Generator<Real>& gen,
                          const std::vector<ImagePair<Real>>& pairs) {
  if (pairs.empty()) throw config_error("validate: empty image list");
  ValidationResult out;
  std::vector<double> psnrs, nfes;
  for (const ImagePair<Real>& pair : pairs) {
    auto fr = gen.forward(pair.lr);
    detail::clip01(fr.sr);
    NfeRecord rec;
    rec.scope = "image";
    rec.id = pair.source_id;
    if (fr.solve) {
      rec.nfe = fr.solve->nfe_used;
      rec.solver_steps = static_cast<long long>(fr.solve->accepted.size());
    }
    rec.psnr = psnr(fr.sr, pair.hr);
    psnrs.push_back(rec.psnr);
    nfes.push_back(static_cast<double>(rec.nfe));
    out.records.push_back(std::move(rec));
  }
  out.psnr_mean = detail::mean_std(psnrs).first;
  auto [nfe_mean, nfe_std] = detail::mean_std(nfes);
  out.nfe_mean = nfe_mean;
  out.nfe_std = nfe_std;
  return out;
}

template <typename Real>
struct StepResult {
  double mse = 0.0;
  GradientReport<Real> report;
  bool applied = false;  // false when the update was skipped
};

// One optimizer step on one batch. The RRDB core and the discrete backend
// backpropagate through a single tape spanning the whole forward pass. The
// adjoint and checkpointed backends split the pass into three stages --
// head (taped), solve (untaped), tail (taped) -- and stitch the pieces with
// the backend's state gradient, so the tape never has to span the solver.
// A diverged backward solve skips the update and leaves every parameter and
// optimizer moment bit-identical.
template <typename Real>
StepResult<Real> train_step(Generator<Real>& gen, const Tensor<Real>& lr_batch,
                            const Tensor<Real>& hr_batch,
                            AdamState<Real>& opt, double lr_rate,
                            long long adjoint_budget = 100000) {
  const std::vector<Tensor<Real>*> params = gen.parameters();
  detail::detach_all(params);
  StepResult<Real> out;
  detail::WallTimer timer;

  const bool staged = gen.config().core == CoreKind::ode &&
                      gen.config().backend != GradientBackend::discrete;
  if (!staged) {
    Tape<Real> tape;
    for (Tensor<Real>* p : params) tape.watch(*p);
    auto fr = gen.forward(&tape, lr_batch, false);
    Tensor<Real> loss = l2_loss(&tape, fr.sr, hr_batch);
    out.mse = static_cast<double>(loss.item());
    tape.backward(loss.node);
    std::vector<Tensor<Real>> grads;
    grads.reserve(params.size());
    for (Tensor<Real>* p : params) {
      grads.push_back(tape.has_gradient(p->node) ? tape.gradient(p->node)
                                                 : Tensor<Real>(p->shape()));
    }
    out.report.method = "discrete";
    if (fr.solve) out.report.forward_nfe = fr.solve->nfe_used;
    out.report.peak_saved_values = tape.saved_values();
    out.applied = adam_step(params, grads, opt, lr_rate);
    out.report.wall_ms = timer.ms();
    detail::detach_all(params);
    return out;
  }

  // Stage 1: head, taped. The solver sees a detached copy of the state.
  Tape<Real> head_tape;
  ConvParams<Real>& head = gen.conv("head");
  head_tape.watch(head.kernel);
  head_tape.watch(head.bias);
  Tensor<Real> feat = gen.head_features(&head_tape, lr_batch);
  Tensor<Real> u0_taped = gen.ode_state0(&head_tape, feat);
  Tensor<Real> u0 = u0_taped;
  u0.node = kDetached;

  const SolverConfig scfg = gen.config().solve_config();
  const bool capture = gen.config().backend == GradientBackend::checkpointed;
  SolveResult<Real> fwd = integrate(gen.ode_field(), u0, scfg, capture);
  if (fwd.budget_exhausted) {
    throw numeric_error("train_step: forward evaluation budget exhausted");
  }

  // Stage 2: tail + loss on its own tape, seeded from the solve's endpoint.
  Tape<Real> tail_tape;
  Tensor<Real> u_final = fwd.final_state;
  u_final.node = kDetached;
  tail_tape.watch(u_final);
  const std::vector<Tensor<Real>*> field_params = gen.field_parameters();
  std::vector<Tensor<Real>*> tail_params;
  for (Tensor<Real>* p : params) {
    const bool in_field =
        std::find(field_params.begin(), field_params.end(), p) !=
        field_params.end();
    if (!in_field && p != &head.kernel && p != &head.bias) {
      tail_params.push_back(p);
      tail_tape.watch(*p);
    }
  }
  Tensor<Real> core_out = gen.core_output_from_state(&tail_tape, u_final);
  Tensor<Real> sr = gen.tail_forward(&tail_tape, core_out);
  Tensor<Real> loss = l2_loss(&tail_tape, sr, hr_batch);
  out.mse = static_cast<double>(loss.item());
  tail_tape.backward(loss.node);
  Tensor<Real> seed = tail_tape.gradient(u_final.node);

  // Stage 3: the backend carries the seed back across the solve.
  GradientReport<Real> rep =
      gen.config().backend == GradientBackend::adjoint
          ? adjoint_backward(gen.ode_field(), fwd.final_state, seed, scfg,
                             adjoint_budget)
          : checkpointed_backward(gen.ode_field(), fwd, seed, scfg);
  rep.forward_nfe = fwd.nfe_used;
  // Both stage tapes are still alive while the backend runs.
  rep.peak_saved_values +=
      head_tape.saved_values() + tail_tape.saved_values();
  if (rep.diverged) {
    rep.wall_ms = timer.ms();
    out.report = std::move(rep);
    detail::detach_all(params);
    return out;  // applied stays false; parameters untouched
  }

  head_tape.backward(u0_taped.node, rep.state_grad);

  std::vector<Tensor<Real>> grads;
  grads.reserve(params.size());
  std::size_t flat = 0;
  for (Tensor<Real>* p : params) {
    if (p == &head.kernel || p == &head.bias) {
      grads.push_back(head_tape.has_gradient(p->node)
                          ? head_tape.gradient(p->node)
                          : Tensor<Real>(p->shape()));
      continue;
    }
    const bool in_field =
        std::find(field_params.begin(), field_params.end(), p) !=
        field_params.end();
    if (in_field) {
      Tensor<Real> g(p->shape());
      for (std::size_t k = 0; k < g.size(); ++k) {
        g.data()[k] = rep.gradients.at(flat++);
      }
      grads.push_back(std::move(g));
    } else {
      grads.push_back(tail_tape.has_gradient(p->node)
                          ? tail_tape.gradient(p->node)
                          : Tensor<Real>(p->shape()));
    }
  }
  if (flat != rep.gradients.size()) {
    throw state_error("train_step: field gradient length mismatch");
  }
  out.applied = adam_step(params, grads, opt, lr_rate);
  rep.wall_ms = timer.ms();
  out.report = std::move(rep);
  detail::detach_all(params);
  return out;
}

struct TrainResult {
  int epochs_run = 0;
  int best_epoch = 0;
  double best_val_psnr = -std::numeric_limits<double>::infinity();
  double final_lr = 0.0;
  std::string metrics_path;
  std::string reports_path;
  std::string best_ckpt_path;
  std::string last_ckpt_path;
};

// Full run. Emits metrics.csv (one train and one val row per epoch),
// grad_reports.jsonl (one line per batch), and best/last checkpoints under
// out_dir. Deterministic for a fixed config when run single-threaded.
template <typename Real>
TrainResult train(const TrainConfig& cfg,
                  const std::vector<ImagePair<Real>>& train_pairs,
                  const std::vector<ImagePair<Real>>& val_pairs,
                  const std::string& out_dir, std::ostream* log = nullptr) {
  cfg.validate();
  if (train_pairs.empty()) throw config_error("train: no training images");
  if (val_pairs.empty()) throw config_error("train: no validation images");
  std::filesystem::create_directories(out_dir);

  Generator<Real> gen(cfg.generator);
  Rng rng(cfg.seed);
  gen.init_params(rng);

  const int stride = cfg.stride == 0 ? cfg.hr_patch : cfg.stride;
  PatchDataset<Real> dataset(train_pairs, cfg.hr_patch, stride, cfg.seed,
                             cfg.augment);
  AdamState<Real> opt = AdamState<Real>::zeros_like(gen.parameters());
  LrController lrc(cfg.learning_rate, cfg.patience, cfg.lr_decay_factor,
                   cfg.min_lr);

  TrainResult res;
  res.metrics_path = out_dir + "/metrics.csv";
  res.reports_path = out_dir + "/grad_reports.jsonl";
  res.best_ckpt_path = out_dir + "/ckpt_best.bin";
  res.last_ckpt_path = out_dir + "/ckpt_last.bin";
  MetricsWriter metrics(res.metrics_path);
  std::ofstream reports(res.reports_path);
  if (!reports) throw io_error("cannot open " + res.reports_path);

  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    const double epoch_lr = lrc.lr();
    auto plan = dataset.plan_epoch(epoch);
    double mse_sum = 0.0;
    std::size_t sample_count = 0;
    std::vector<double> batch_nfes;
    for (std::size_t first = 0; first < dataset.size();
         first += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t count = std::min<std::size_t>(
          static_cast<std::size_t>(cfg.batch_size), dataset.size() - first);
      auto batch = dataset.make_batch(plan, first, count);
      StepResult<Real> step =
          train_step(gen, batch.lr, batch.hr, opt, epoch_lr);
      reports << to_jsonl(step.report) << '\n';
      if (step.applied) {
        mse_sum += step.mse * static_cast<double>(count);
        sample_count += count;
      }
      batch_nfes.push_back(static_cast<double>(step.report.forward_nfe));
    }
    reports.flush();

    const double train_mse =
        sample_count > 0 ? mse_sum / static_cast<double>(sample_count)
                         : std::numeric_limits<double>::quiet_NaN();
    const double train_psnr =
        train_mse == 0.0 ? kPsnrCapDb : 10.0 * std::log10(1.0 / train_mse);
    auto [bn_mean, bn_std] = detail::mean_std(batch_nfes);
    metrics.row(epoch, "train", train_psnr, bn_mean, bn_std, epoch_lr);

    ValidationResult val = validate(gen, val_pairs);
    metrics.row(epoch, "val", val.psnr_mean, val.nfe_mean, val.nfe_std,
                epoch_lr);
    if (log) {
      *log << "epoch " << epoch << " train_psnr " << format_sig9(train_psnr)
           << " val_psnr " << format_sig9(val.psnr_mean) << " lr "
           << format_sig9(epoch_lr) << '\n';
    }

    save_checkpoint(res.last_ckpt_path, gen);
    if (val.psnr_mean > res.best_val_psnr) {
      res.best_val_psnr = val.psnr_mean;
      res.best_epoch = epoch;
      save_checkpoint(res.best_ckpt_path, gen);
    }
    res.epochs_run = epoch;
    const bool stop = lrc.observe(val.psnr_mean);
    res.final_lr = lrc.lr();
    if (stop) break;
  }
  return res;
}

}  // namespace odesr
