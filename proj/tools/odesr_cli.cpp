// Command-line front end: training, evaluation, gradient checking, the
// solver-cost difficulty report, the backward-stability sweep, and one-shot
// upscaling. Exit codes: 0 success, 2 configuration/input error, 3 numeric
// error.
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "odesr/checkpoint.hpp"
#include "odesr/dataset.hpp"
#include "odesr/errors.hpp"
#include "odesr/image.hpp"
#include "odesr/png_io.hpp"
#include "odesr/reports.hpp"
#include "odesr/rng.hpp"
#include "odesr/train.hpp"

namespace {

using namespace odesr;

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string precision = "f64";
  std::string backend;  // empty keeps whatever the config says
  std::string out_dir = "out";
  std::string data_dir;
  std::string ckpt;
  std::vector<std::string> rrdb_ckpts;
  std::string split = "val";
  std::vector<double> lambdas;
  long long budget = 10000;
  double bench_rtol = 1e-3;
  std::string upscale_in, upscale_out;
};

json load_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw io_error("cannot open config: " + path);
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw config_error("bad JSON in " + path + ": " + e.what());
  }
}

void require(bool ok, const std::string& msg) {
  if (!ok) throw config_error(msg);
}

// --- train -----------------------------------------------------------------

template <typename Real>
int cmd_train(const Options& o) {
  require(!o.config.empty(), "train requires --config <run config JSON>");
  require(!o.data_dir.empty(), "train requires --data <folder of PNGs>");
  TrainConfig cfg = train_from_json(load_json_file(o.config));
  if (o.seed) cfg.seed = *o.seed;
  if (!o.backend.empty()) cfg.generator.backend = parse_backend(o.backend);

  const DatasetManifest manifest = build_manifest(o.data_dir);
  const auto train_pairs =
      load_pairs<Real>(manifest, "train", cfg.generator.scale);
  const auto val_pairs = load_pairs<Real>(manifest, "val", cfg.generator.scale);
  std::cout << train_pairs.size() << " training / " << val_pairs.size()
            << " validation images from " << o.data_dir << "\n";

  TrainResult res = train(cfg, train_pairs, val_pairs, o.out_dir, &std::cout);
  std::cout << "done: " << res.epochs_run << " epochs, best val psnr "
            << format_sig9(res.best_val_psnr) << " dB at epoch "
            << res.best_epoch << "\n"
            << "metrics: " << res.metrics_path << "\n"
            << "reports: " << res.reports_path << "\n"
            << "checkpoints: " << res.best_ckpt_path << ", "
            << res.last_ckpt_path << "\n";
  return 0;
}

// --- eval ------------------------------------------------------------------

template <typename Real>
int cmd_eval(const Options& o) {
  require(!o.ckpt.empty(), "eval requires --ckpt <checkpoint>");
  require(!o.data_dir.empty(), "eval requires --data <folder of PNGs>");
  auto gen = load_checkpoint<Real>(o.ckpt);
  const auto pairs = load_pairs<Real>(build_manifest(o.data_dir), o.split,
                                      gen->config().scale);
  require(!pairs.empty(), "no images in split '" + o.split + "'");

  ValidationResult v = validate(*gen, pairs);
  double bicubic_mean = 0.0;
  std::cout << "image_id,psnr,steps,nfe,bicubic_psnr\n";
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    Tensor<Real> base = bicubic_upsample(pairs[i].lr, gen->config().scale);
    const double bp = psnr(base, pairs[i].hr);
    bicubic_mean += bp;
    const NfeRecord& r = v.records[i];
    std::cout << r.id << ',' << format_sig9(r.psnr) << ',' << r.solver_steps
              << ',' << r.nfe << ',' << format_sig9(bp) << "\n";
  }
  bicubic_mean /= static_cast<double>(pairs.size());
  std::cout << "mean psnr " << format_sig9(v.psnr_mean) << " dB (bicubic "
            << format_sig9(bicubic_mean) << " dB), nfe mean "
            << format_sig9(v.nfe_mean) << " std " << format_sig9(v.nfe_std)
            << "\n";
  return 0;
}

// --- grad-check ------------------------------------------------------------

// A smooth two-conv field (sine nonlinearity between) so the finite-difference
// oracle is corner-free and the 1e-4 bar measures the backends, not the
// reference. Parameters are the conv kernels and biases, or nothing for the
// parameter-free cells.
template <typename Real>
struct CheckField {
  ConvParams<Real> c1, c2;
  bool time_dep;
  std::unique_ptr<CallbackField<Real>> field;

  CheckField(Rng& rng, int channels, bool td, bool with_params)
      : time_dep(td) {
    const int in1 = channels + (td ? 1 : 0);
    c1.kernel = random_normal<Real>(rng, {channels, in1, 3, 3}, Real(0.3));
    c1.bias = random_normal<Real>(rng, {1, channels, 1, 1}, Real(0.05));
    c1.padding = 1;
    c2.kernel =
        random_normal<Real>(rng, {channels, channels, 3, 3}, Real(0.3));
    c2.bias = random_normal<Real>(rng, {1, channels, 1, 1}, Real(0.05));
    c2.padding = 1;
    std::vector<Tensor<Real>*> params;
    if (with_params) {
      params = {&c1.kernel, &c1.bias, &c2.kernel, &c2.bias};
    }
    field = std::make_unique<CallbackField<Real>>(
        [this](Tape<Real>* t, const Tensor<Real>& u, double tt) {
          Tensor<Real> h = u;
          if (time_dep) h = concat_channels(t, time_channel(u, Real(tt)), h);
          h = conv2d(t, h, c1);
          h = sin_wave(t, h, Real(2));
          return conv2d(t, h, c2);
        },
        std::move(params));
  }
};

// Largest entry difference scaled by the reference's largest entry; entrywise
// ratios are meaningless near a gradient's zero crossings.
template <typename Real>
double linf_rel(const std::vector<Real>& a, const std::vector<Real>& b) {
  double diff = 0, ref = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff = std::max(diff, std::abs(static_cast<double>(a[i] - b[i])));
    ref = std::max(ref, std::abs(static_cast<double>(b[i])));
  }
  return diff / std::max(ref, 1e-300);
}

template <typename Real>
double loss_value(CallbackField<Real>& field, const Tensor<Real>& u0,
                  const Tensor<Real>& w, const SolverConfig& cfg) {
  const Tensor<Real> uT = integrate(field, u0, cfg).final_state;
  double acc = 0;
  for (std::size_t i = 0; i < uT.size(); ++i) {
    acc += static_cast<double>(uT.data()[i]) * static_cast<double>(w.data()[i]);
  }
  return acc;
}

template <typename Real>
int cmd_grad_check(const Options& o) {
  const bool f32 = sizeof(Real) == 4;
  SolverConfig cfg;
  cfg.rtol = f32 ? 1e-5 : 1e-10;
  cfg.atol = f32 ? 1e-7 : 1e-13;
  cfg.t0 = 0.0;
  cfg.t_final = 0.5;
  const double h = f32 ? 1e-2 : 1e-5;

  std::vector<std::string> backends{"adjoint", "discrete", "checkpointed"};
  if (!o.backend.empty()) {
    parse_backend(o.backend);  // validates the name
    backends = {o.backend};
  }

  bool all_ok = true;
  std::cout << "backend        cells  max_rel_err\n";
  for (const std::string& method : backends) {
    double worst = 0;
    int cells = 0;
    for (bool time_dep : {false, true}) {
      for (bool with_params : {false, true}) {
        Rng rng(100 + (time_dep ? 1 : 0) * 2 + (with_params ? 1 : 0));
        CheckField<Real> cf(rng, 2, time_dep, with_params);
        const Tensor<Real> u0 =
            random_normal<Real>(rng, {1, 2, 5, 5}, Real(0.5));
        const Tensor<Real> w =
            random_uniform<Real>(rng, u0.shape(), Real(-1), Real(1));
        const LossClosure<Real> loss = [&w](Tape<Real>& t,
                                            const Tensor<Real>& xT) {
          return dot_const(&t, xT, w);
        };

        GradientReport<Real> rep;
        if (method == "adjoint") {
          rep = adjoint_gradient(*cf.field, u0, w, cfg, 1000000);
        } else if (method == "discrete") {
          rep = discrete_gradient(*cf.field, u0, loss, cfg);
        } else {
          rep = checkpointed_gradient(*cf.field, u0, loss, cfg);
        }
        if (rep.diverged) {
          worst = std::numeric_limits<double>::infinity();
          ++cells;
          continue;
        }

        // Central differences over every parameter and state coordinate.
        auto params = cf.field->parameters();
        std::vector<Real> fd_params;
        for (Tensor<Real>* p : params) {
          for (std::size_t k = 0; k < p->size(); ++k) {
            const Real saved = p->data()[k];
            p->data()[k] = saved + Real(h);
            const double up = loss_value(*cf.field, u0, w, cfg);
            p->data()[k] = saved - Real(h);
            const double dn = loss_value(*cf.field, u0, w, cfg);
            p->data()[k] = saved;
            fd_params.push_back(Real((up - dn) / (2 * h)));
          }
        }
        std::vector<Real> fd_state;
        Tensor<Real> u = u0;
        for (std::size_t k = 0; k < u.size(); ++k) {
          const Real saved = u.data()[k];
          u.data()[k] = saved + Real(h);
          const double up = loss_value(*cf.field, u, w, cfg);
          u.data()[k] = saved - Real(h);
          const double dn = loss_value(*cf.field, u, w, cfg);
          u.data()[k] = saved;
          fd_state.push_back(Real((up - dn) / (2 * h)));
        }

        double cell_err = 0;
        if (with_params) {
          cell_err = std::max(cell_err, linf_rel(rep.gradients, fd_params));
        } else if (!rep.gradients.empty()) {
          cell_err = std::numeric_limits<double>::infinity();  // must be empty
        }
        std::vector<Real> state_grad(
            rep.state_grad.data(), rep.state_grad.data() + rep.state_grad.size());
        cell_err = std::max(cell_err, linf_rel(state_grad, fd_state));
        worst = std::max(worst, cell_err);
        ++cells;
      }
    }
    std::printf("%-13s %6d  %.3e\n", method.c_str(), cells, worst);
    all_ok = all_ok && worst < 1e-4;
  }
  std::cout << (all_ok ? "all backends within 1e-4 of finite differences\n"
                       : "gradient check FAILED the 1e-4 bar\n");
  return all_ok ? 0 : 3;
}

// --- nfe-report ------------------------------------------------------------

template <typename Real>
int cmd_nfe_report(const Options& o) {
  require(!o.ckpt.empty(), "nfe-report requires --ckpt <flow checkpoint>");
  require(o.rrdb_ckpts.size() >= 2,
          "nfe-report requires at least two --rrdb-ckpt checkpoints");
  require(!o.data_dir.empty(), "nfe-report requires --data <folder of PNGs>");

  auto ode = load_checkpoint<Real>(o.ckpt);
  std::vector<std::unique_ptr<Generator<Real>>> rrdbs;
  std::vector<Generator<Real>*> raw;
  for (const std::string& path : o.rrdb_ckpts) {
    rrdbs.push_back(load_checkpoint<Real>(path));
    raw.push_back(rrdbs.back().get());
  }
  const auto pairs = load_pairs<Real>(build_manifest(o.data_dir), o.split,
                                      ode->config().scale);
  require(!pairs.empty(), "no images in split '" + o.split + "'");

  std::filesystem::create_directories(o.out_dir);
  const std::string csv = o.out_dir + "/nfe_report.csv";
  NfeDifficultyReport rep = nfe_difficulty_report(*ode, raw, pairs, csv);
  std::cout << "wrote " << csv << " (" << rep.rows.size() << " images, mode "
            << rep.mode_steps << " steps)\n";
  if (rep.degenerate) std::cout << "warning: " << rep.warning << "\n";
  for (const auto& [bucket, means] : rep.bucket_mean_psnr) {
    std::cout << bucket << " (" << rep.bucket_counts.at(bucket)
              << " images): mean psnr";
    for (double m : means) std::cout << ' ' << format_sig9(m);
    std::cout << "\n";
  }
  return 0;
}

// --- stability-bench -------------------------------------------------------

int cmd_stability(const Options& o) {
  std::vector<double> lambdas = o.lambdas;
  if (lambdas.empty()) lambdas = {0, 10, 25, 50, 75, 100};
  std::vector<StabilityScenario> scenarios;
  for (double lambda : lambdas) {
    StabilityScenario sc;
    sc.lambda = lambda;
    sc.rtol = o.bench_rtol;
    sc.budget = o.budget;
    scenarios.push_back(sc);
  }
  std::filesystem::create_directories(o.out_dir);
  const std::string csv = o.out_dir + "/stability.csv";
  StabilityTable table = stability_bench(scenarios, csv);
  std::cout << "wrote " << csv << " (" << table.rows.size() << " rows)\n"
            << table.summary();
  return 0;
}

// --- upscale ---------------------------------------------------------------

template <typename Real>
int cmd_upscale(const Options& o) {
  Tensor<Real> img = load_png<Real>(o.upscale_in);
  Tensor<Real> out;
  if (o.ckpt.empty()) {
    out = bicubic_upsample(img, 4);
  } else {
    auto gen = load_checkpoint<Real>(o.ckpt);
    auto fr = gen->forward(img);
    detail::clip01(fr.sr);
    out = std::move(fr.sr);
  }
  save_png(out, o.upscale_out);
  std::cout << "wrote " << o.upscale_out << " (" << out.width() << "x"
            << out.height() << ")\n";
  return 0;
}

template <typename F32Fn, typename F64Fn>
int dispatch(const std::string& precision, F32Fn f32, F64Fn f64) {
  if (precision == "f32") return f32();
  if (precision == "f64") return f64();
  throw config_error("precision must be f32 or f64, got '" + precision + "'");
}

}  // namespace

int main(int argc, char** argv) {
  Options o;
  CLI::App app{"neural-flow x4 super-resolution toolkit"};
  app.require_subcommand(1);

  app.add_option("--config", o.config, "run config JSON");
  app.add_option("--seed", o.seed, "override the config seed");
  app.add_option("--precision", o.precision, "f32 or f64 (default f64)");
  app.add_option("--backend", o.backend,
                 "gradient backend: adjoint, discrete, or checkpointed");
  app.add_option("--out-dir", o.out_dir, "output directory (default ./out)");

  auto add_data = [&](CLI::App* sub) {
    sub->add_option("--data", o.data_dir, "folder of PNG images");
  };
  CLI::App* train = app.add_subcommand("train", "train a generator");
  add_data(train);
  CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  add_data(eval);
  eval->add_option("--ckpt", o.ckpt, "checkpoint to evaluate");
  eval->add_option("--split", o.split, "train, val, or all (default val)");
  CLI::App* gc = app.add_subcommand(
      "grad-check", "compare every gradient backend against finite differences");
  CLI::App* nfe = app.add_subcommand(
      "nfe-report", "bucket images by solver effort and tabulate RRDB gains");
  add_data(nfe);
  nfe->add_option("--ckpt", o.ckpt, "flow-model checkpoint");
  nfe->add_option("--rrdb-ckpt", o.rrdb_ckpts,
                  "RRDB checkpoints in increasing depth (repeatable)");
  nfe->add_option("--split", o.split, "train, val, or all (default val)");
  CLI::App* bench = app.add_subcommand(
      "stability-bench", "sweep the contraction family across the backends");
  bench->add_option("--lambda", o.lambdas, "contraction rates (repeatable)");
  bench->add_option("--budget", o.budget, "backward NFE budget");
  bench->add_option("--rtol", o.bench_rtol, "solver relative tolerance");
  CLI::App* up = app.add_subcommand("upscale", "x4-upscale one PNG");
  up->add_option("input", o.upscale_in, "input PNG")->required();
  up->add_option("output", o.upscale_out, "output PNG")->required();
  up->add_option("--ckpt", o.ckpt,
                 "generator checkpoint (bicubic when omitted)");
  for (CLI::App* sub : {train, eval, gc, nfe, bench, up}) sub->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n" << app.help();
    return 2;
  }

  try {
    if (app.got_subcommand(train)) {
      return dispatch(o.precision, [&] { return cmd_train<float>(o); },
                      [&] { return cmd_train<double>(o); });
    }
    if (app.got_subcommand(eval)) {
      return dispatch(o.precision, [&] { return cmd_eval<float>(o); },
                      [&] { return cmd_eval<double>(o); });
    }
    if (app.got_subcommand(gc)) {
      return dispatch(o.precision, [&] { return cmd_grad_check<float>(o); },
                      [&] { return cmd_grad_check<double>(o); });
    }
    if (app.got_subcommand(nfe)) {
      return dispatch(o.precision, [&] { return cmd_nfe_report<float>(o); },
                      [&] { return cmd_nfe_report<double>(o); });
    }
    if (app.got_subcommand(bench)) return cmd_stability(o);
    if (app.got_subcommand(up)) {
      return dispatch(o.precision, [&] { return cmd_upscale<float>(o); },
                      [&] { return cmd_upscale<double>(o); });
    }
    throw config_error("no subcommand given");
  } catch (const config_error& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const io_error& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return 2;
  } catch (const numeric_error& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return 3;
  } catch (const state_error& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return 3;
  }
}
