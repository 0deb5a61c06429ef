// x4 super-resolution generators: a conv head/tail shared by two cores — a
// filter-space ODE flow (optionally time-dependent, optionally augmented with
// extra state channels) and a chain of residual-in-residual dense blocks.
#pragma once

#include <cmath>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "odesr/dopri5.hpp"
#include "odesr/errors.hpp"
#include "odesr/ops.hpp"
#include "odesr/rng.hpp"
#include "odesr/tape.hpp"
#include "odesr/tensor.hpp"
#include "odesr/vector_field.hpp"

namespace odesr {

enum class CoreKind { ode, rrdb };
enum class GradientBackend { adjoint, discrete, checkpointed };

inline const char* core_name(CoreKind k) {
  return k == CoreKind::ode ? "ode" : "rrdb";
}

inline CoreKind parse_core(const std::string& s) {
  if (s == "ode") return CoreKind::ode;
  if (s == "rrdb") return CoreKind::rrdb;
  throw config_error("unknown core '" + s + "' (expected ode|rrdb)");
}

inline const char* backend_name(GradientBackend b) {
  switch (b) {
    case GradientBackend::adjoint:
      return "adjoint";
    case GradientBackend::discrete:
      return "discrete";
    default:
      return "checkpointed";
  }
}

inline GradientBackend parse_backend(const std::string& s) {
  if (s == "adjoint") return GradientBackend::adjoint;
  if (s == "discrete") return GradientBackend::discrete;
  if (s == "checkpointed") return GradientBackend::checkpointed;
  throw config_error("unknown backend '" + s +
                     "' (expected adjoint|discrete|checkpointed)");
}

struct GeneratorConfig {
  int filters = 64;
  int scale = 4;
  CoreKind core = CoreKind::ode;
  int ode_layers = 7;
  bool time_dependent = false;
  int augment_channels = 8;  // 0 disables augmentation
  double t_final = 1.0;
  int rrdb_blocks = 20;
  int growth = 32;
  SolverConfig solver{};
  GradientBackend backend = GradientBackend::discrete;

  int state_channels() const { return filters + augment_channels; }

  int field_input_channels() const {
    return state_channels() + (time_dependent ? 1 : 0);
  }

  // The generator's horizon wins over whatever the nested solver block says.
  SolverConfig solve_config() const {
    SolverConfig s = solver;
    s.t0 = 0.0;
    s.t_final = t_final;
    return s;
  }

  void validate() const {
    if (filters < 1) throw config_error("filters must be >= 1");
    // The tail is two x2 upsample stages; only scale 4 is realizable.
    if (scale != 4) throw config_error("scale must be 4");
    if (augment_channels < 0) throw config_error("augment_channels must be >= 0");
    if (core == CoreKind::ode) {
      if (ode_layers < 1) throw config_error("ode_layers must be >= 1");
      if (!(t_final > 0.0)) throw config_error("t_final must be > 0");
      solve_config().validate();
    } else {
      if (rrdb_blocks < 1) throw config_error("rrdb_blocks must be >= 1");
      if (growth < 1) throw config_error("growth must be >= 1");
    }
  }
};

// Every conv in the generator, in construction order. Single source of truth
// for building, counting, and naming parameters; f(name, out_c, in_c, k, pad).
template <typename Fn>
void visit_conv_layout(const GeneratorConfig& cfg, Fn&& f) {
  f("head", cfg.filters, 3, 3, 1);
  if (cfg.core == CoreKind::ode) {
    for (int i = 0; i < cfg.ode_layers; ++i) {
      // Only the first conv sees the time channel; the state width is fixed.
      const int in_c =
          i == 0 ? cfg.field_input_channels() : cfg.state_channels();
      f("ode.conv" + std::to_string(i), cfg.state_channels(), in_c, 3, 1);
    }
  } else {
    for (int b = 0; b < cfg.rrdb_blocks; ++b) {
      for (int u = 0; u < 3; ++u) {
        for (int c = 0; c < 5; ++c) {
          const int in_c = cfg.filters + c * cfg.growth;
          const int out_c = c == 4 ? cfg.filters : cfg.growth;
          f("rrdb.b" + std::to_string(b) + ".u" + std::to_string(u) + ".c" +
                std::to_string(c),
            out_c, in_c, 3, 1);
        }
      }
    }
  }
  f("tail.up0", cfg.filters, cfg.filters, 3, 1);
  f("tail.up1", cfg.filters, cfg.filters, 3, 1);
  f("tail.fuse", cfg.filters, cfg.filters, 3, 1);
  f("tail.out", 3, cfg.filters, 3, 1);
}

// Exact element count over every kernel and bias of the configured layout.
inline std::size_t count_params(const GeneratorConfig& cfg) {
  cfg.validate();
  std::size_t n = 0;
  visit_conv_layout(cfg, [&](const std::string&, int oc, int ic, int k, int) {
    n += static_cast<std::size_t>(oc) * ic * k * k + oc;
  });
  return n;
}

template <typename Real>
class Generator {
 public:
  static constexpr Real kResidualScale = Real(0.2);
  static constexpr Real kLeakySlope = Real(0.2);

  struct ForwardResult {
    Tensor<Real> sr;
    std::optional<SolveResult<Real>> solve;  // present iff the core is an ODE
  };

  explicit Generator(GeneratorConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    visit_conv_layout(cfg_, [&](const std::string& name, int oc, int ic, int k,
                                int pad) {
      names_.push_back(name);
      convs_.push_back(ConvParams<Real>::zeros(oc, ic, k, pad));
    });
    core_begin_ = 1;
    core_end_ = convs_.size() - 4;
    if (cfg_.core == CoreKind::ode) {
      std::vector<Tensor<Real>*> fp;
      for (std::size_t i = core_begin_; i < core_end_; ++i) {
        fp.push_back(&convs_[i].kernel);
        fp.push_back(&convs_[i].bias);
      }
      field_ = std::make_unique<CallbackField<Real>>(
          [this](Tape<Real>* tape, const Tensor<Real>& u, double t) {
            return field_eval(tape, u, t);
          },
          std::move(fp));
    }
  }

  // The field closure captures `this`; pinning the object keeps it valid.
  Generator(const Generator&) = delete;
  Generator& operator=(const Generator&) = delete;

  const GeneratorConfig& config() const { return cfg_; }

  // Scaled Kaiming-normal kernels (factor 0.1), zero biases. The last conv of
  // the ODE function starts at zero so the initial flow is the identity.
  void init_params(Rng& rng) {
    for (ConvParams<Real>& p : convs_) {
      const int fan_in = p.kernel.channels() * p.kernel.height() *
                         p.kernel.width();
      const Real stddev =
          Real(0.1 * std::sqrt(2.0 / static_cast<double>(fan_in)));
      p.kernel = random_normal<Real>(rng, p.kernel.shape(), stddev);
      p.bias = Tensor<Real>(p.bias.shape());
    }
    if (cfg_.core == CoreKind::ode) {
      ConvParams<Real>& last = convs_[core_end_ - 1];
      last.kernel = Tensor<Real>(last.kernel.shape());
    }
  }

  std::vector<Tensor<Real>*> parameters() {
    std::vector<Tensor<Real>*> out;
    for (ConvParams<Real>& p : convs_) {
      out.push_back(&p.kernel);
      out.push_back(&p.bias);
    }
    return out;
  }

  std::vector<std::pair<std::string, Tensor<Real>*>> named_parameters() {
    std::vector<std::pair<std::string, Tensor<Real>*>> out;
    for (std::size_t i = 0; i < convs_.size(); ++i) {
      out.emplace_back(names_[i] + ".kernel", &convs_[i].kernel);
      out.emplace_back(names_[i] + ".bias", &convs_[i].bias);
    }
    return out;
  }

  // Parameters integrated through the solver (empty for the RRDB core).
  std::vector<Tensor<Real>*> field_parameters() {
    std::vector<Tensor<Real>*> out;
    if (cfg_.core != CoreKind::ode) return out;
    for (std::size_t i = core_begin_; i < core_end_; ++i) {
      out.push_back(&convs_[i].kernel);
      out.push_back(&convs_[i].bias);
    }
    return out;
  }

  // Everything a plain tape reaches outside the solve: head and tail convs,
  // plus the whole core when it is not an ODE.
  std::vector<Tensor<Real>*> outer_parameters() {
    std::vector<Tensor<Real>*> out;
    out.push_back(&convs_[0].kernel);
    out.push_back(&convs_[0].bias);
    if (cfg_.core != CoreKind::ode) {
      for (std::size_t i = core_begin_; i < core_end_; ++i) {
        out.push_back(&convs_[i].kernel);
        out.push_back(&convs_[i].bias);
      }
    }
    for (std::size_t i = core_end_; i < convs_.size(); ++i) {
      out.push_back(&convs_[i].kernel);
      out.push_back(&convs_[i].bias);
    }
    return out;
  }

  ConvParams<Real>& conv(const std::string& name) {
    for (std::size_t i = 0; i < names_.size(); ++i) {
      if (names_[i] == name) return convs_[i];
    }
    throw config_error("no conv named '" + name + "'");
  }

  VectorField<Real>& ode_field() {
    if (!field_) throw config_error("generator core is not an ODE");
    return *field_;
  }

  Tensor<Real> head_features(Tape<Real>* tape, const Tensor<Real>& lr) const {
    if (lr.channels() != 3) {
      throw config_error("generator input must have 3 channels, got " +
                         std::to_string(lr.channels()));
    }
    return conv2d(tape, lr, convs_[0]);
  }

  // Pads the features with augment_channels zero channels.
  Tensor<Real> ode_state0(Tape<Real>* tape, const Tensor<Real>& feat) const {
    require_core(CoreKind::ode);
    if (cfg_.augment_channels == 0) return feat;
    Tensor<Real> zeros(feat.batch(), cfg_.augment_channels, feat.height(),
                       feat.width());
    return concat_channels(tape, feat, zeros);
  }

  // Drops the augmented channels; the tail expects `filters` channels.
  Tensor<Real> core_output_from_state(Tape<Real>* tape,
                                      const Tensor<Real>& u_final) const {
    require_core(CoreKind::ode);
    if (cfg_.augment_channels == 0) return u_final;
    return split_channels(tape, u_final, cfg_.filters).first;
  }

  // ODE function: the conv stack applied to (time channel ++ state) when
  // time-dependent, with LeakyReLU between convs and none after the last.
  Tensor<Real> field_eval(Tape<Real>* tape, const Tensor<Real>& u,
                          double t) const {
    require_core(CoreKind::ode);
    Tensor<Real> h = u;
    if (cfg_.time_dependent) {
      h = concat_channels(tape, time_channel(u, Real(t)), h);
    }
    for (int i = 0; i < cfg_.ode_layers; ++i) {
      h = conv2d(tape, h, convs_[core_begin_ + static_cast<std::size_t>(i)]);
      if (i + 1 < cfg_.ode_layers) h = leaky_relu(tape, h, kLeakySlope);
    }
    return h;
  }

  std::pair<Tensor<Real>, SolveResult<Real>> ode_core(
      Tape<Real>* tape, const Tensor<Real>& feat,
      bool capture_checkpoints = false) {
    Tensor<Real> u0 = ode_state0(tape, feat);
    SolveResult<Real> res =
        integrate(*field_, u0, cfg_.solve_config(), capture_checkpoints, tape);
    Tensor<Real> out = core_output_from_state(tape, res.final_state);
    return {std::move(out), std::move(res)};
  }

  // Five convs, each fed the concat of the unit input and all prior outputs;
  // unit output = x + 0.2 * dense(x).
  Tensor<Real> dense_unit(Tape<Real>* tape, const Tensor<Real>& x, int block,
                          int unit) const {
    require_core(CoreKind::rrdb);
    const std::size_t base =
        core_begin_ + static_cast<std::size_t>(block * 15 + unit * 5);
    Tensor<Real> cat = x;
    Tensor<Real> out;
    for (int c = 0; c < 5; ++c) {
      out = conv2d(tape, cat, convs_[base + static_cast<std::size_t>(c)]);
      if (c < 4) {
        out = leaky_relu(tape, out, kLeakySlope);
        cat = concat_channels(tape, cat, out);
      }
    }
    return add(tape, x, scale(tape, out, kResidualScale));
  }

  // Three units chained; the group output is x + 0.2 * (chain(x) - x), i.e.
  // the residual scale blends toward the chain, so zero-weight convs leave
  // the group an exact identity (chain == x makes the correction exactly 0).
  Tensor<Real> rrdb_group(Tape<Real>* tape, const Tensor<Real>& x,
                          int block) const {
    Tensor<Real> h = x;
    for (int u = 0; u < 3; ++u) h = dense_unit(tape, h, block, u);
    const Real coeffs[2] = {Real(1), Real(-1)};
    const Tensor<Real>* terms[2] = {&h, &x};
    Tensor<Real> delta = lincomb<Real>(tape, {coeffs, 2}, {terms, 2});
    return add(tape, x, scale(tape, delta, kResidualScale));
  }

  Tensor<Real> rrdb_core(Tape<Real>* tape, const Tensor<Real>& x) const {
    require_core(CoreKind::rrdb);
    Tensor<Real> h = x;
    for (int b = 0; b < cfg_.rrdb_blocks; ++b) h = rrdb_group(tape, h, b);
    return h;
  }

  // Two x2 nearest-upsample+conv+LeakyReLU stages, one fusing conv, then a
  // linear projection back to RGB.
  Tensor<Real> tail_forward(Tape<Real>* tape,
                            const Tensor<Real>& core_out) const {
    Tensor<Real> h = upsample_nearest(tape, core_out, 2);
    h = leaky_relu(tape, conv2d(tape, h, tail(0)), kLeakySlope);
    h = upsample_nearest(tape, h, 2);
    h = leaky_relu(tape, conv2d(tape, h, tail(1)), kLeakySlope);
    h = leaky_relu(tape, conv2d(tape, h, tail(2)), kLeakySlope);
    return conv2d(tape, h, tail(3));
  }

  ForwardResult forward(Tape<Real>* tape, const Tensor<Real>& lr,
                        bool capture_checkpoints = false) {
    Tensor<Real> feat = head_features(tape, lr);
    if (cfg_.core == CoreKind::ode) {
      auto [core, res] = ode_core(tape, feat, capture_checkpoints);
      return {tail_forward(tape, core), std::move(res)};
    }
    return {tail_forward(tape, rrdb_core(tape, feat)), std::nullopt};
  }

  ForwardResult forward(const Tensor<Real>& lr) { return forward(nullptr, lr); }

 private:
  void require_core(CoreKind k) const {
    if (cfg_.core != k) {
      throw config_error(std::string("operation requires the ") +
                         core_name(k) + " core, generator has " +
                         core_name(cfg_.core));
    }
  }

  const ConvParams<Real>& tail(int j) const {
    return convs_[core_end_ + static_cast<std::size_t>(j)];
  }

  GeneratorConfig cfg_;
  std::vector<std::string> names_;
  std::vector<ConvParams<Real>> convs_;
  std::size_t core_begin_ = 0;
  std::size_t core_end_ = 0;
  std::unique_ptr<CallbackField<Real>> field_;
};

}  // namespace odesr
