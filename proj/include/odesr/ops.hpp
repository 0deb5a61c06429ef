// Differentiable primitives over 4-D tensors: exactly the set the
// super-resolution generators and the solver's reverse pass need.
// Every op records itself on the tape when one is active and any input is
// attached; otherwise it computes values only.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <span>
#include <string>
#include <vector>

#include "odesr/errors.hpp"
#include "odesr/tape.hpp"
#include "odesr/tensor.hpp"

namespace odesr {

template <typename Real>
struct ConvParams {
  Tensor<Real> kernel;  // (out_channels, in_channels, kh, kw)
  Tensor<Real> bias;    // (1, out_channels, 1, 1)
  int padding = 1;

  static ConvParams zeros(int out_c, int in_c, int k, int padding) {
    ConvParams p;
    p.kernel = Tensor<Real>(out_c, in_c, k, k);
    p.bias = Tensor<Real>(1, out_c, 1, 1);
    p.padding = padding;
    return p;
  }

  std::size_t count() const { return kernel.size() + bias.size(); }
};

namespace detail {

// Gathers the (in_c * k * k) x (out_h * out_w) patch matrix for one batch
// sample. Out-of-range taps stay zero.
template <typename Real>
void im2col(const Tensor<Real>& in, int b, int k, int pad, int out_h,
            int out_w, std::vector<Real>& cols) {
  const int ic = in.channels(), h = in.height(), w = in.width();
  const std::size_t npix = static_cast<std::size_t>(out_h) * out_w;
  cols.assign(static_cast<std::size_t>(ic) * k * k * npix, Real(0));
  for (int c = 0; c < ic; ++c) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const std::size_t row =
            (static_cast<std::size_t>(c) * k + ky) * k + kx;
        Real* dst = cols.data() + row * npix;
        const int x0 = std::max(0, pad - kx);
        const int x1 = std::min(out_w - 1, w - 1 - kx + pad);
        if (x1 < x0) continue;
        for (int y = 0; y < out_h; ++y) {
          const int iy = y + ky - pad;
          if (iy < 0 || iy >= h) continue;
          const Real* src = &in.at(b, c, iy, x0 + kx - pad);
          std::memcpy(dst + static_cast<std::size_t>(y) * out_w + x0, src,
                      static_cast<std::size_t>(x1 - x0 + 1) * sizeof(Real));
        }
      }
    }
  }
}

// Scatter-adds a patch-matrix gradient back onto the input layout.
template <typename Real>
void col2im_add(const std::vector<Real>& cols, int b, int k, int pad,
                int out_h, int out_w, Tensor<Real>& gin) {
  const int ic = gin.channels(), h = gin.height(), w = gin.width();
  const std::size_t npix = static_cast<std::size_t>(out_h) * out_w;
  for (int c = 0; c < ic; ++c) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const std::size_t row =
            (static_cast<std::size_t>(c) * k + ky) * k + kx;
        const Real* src = cols.data() + row * npix;
        const int x0 = std::max(0, pad - kx);
        const int x1 = std::min(out_w - 1, w - 1 - kx + pad);
        if (x1 < x0) continue;
        for (int y = 0; y < out_h; ++y) {
          const int iy = y + ky - pad;
          if (iy < 0 || iy >= h) continue;
          Real* dst = &gin.at(b, c, iy, x0 + kx - pad);
          const Real* s = src + static_cast<std::size_t>(y) * out_w + x0;
          for (int i = 0; i <= x1 - x0; ++i) dst[i] += s[i];
        }
      }
    }
  }
}

template <typename Real>
bool attached(const Tensor<Real>& t) {
  return t.node != kDetached;
}

}  // namespace detail

template <typename Real>
Tensor<Real> conv2d(Tape<Real>* tape, const Tensor<Real>& input,
                    const ConvParams<Real>& params) {
  const Tensor<Real>& kern = params.kernel;
  const int oc = kern.batch(), ic = kern.channels(), k = kern.height();
  if (kern.height() != kern.width()) {
    throw config_error("conv2d kernel must be square");
  }
  if (input.channels() != ic) {
    throw config_error("conv2d channel mismatch: input has " +
                       std::to_string(input.channels()) + ", kernel expects " +
                       std::to_string(ic));
  }
  const int pad = params.padding;
  const int out_h = input.height() + 2 * pad - k + 1;
  const int out_w = input.width() + 2 * pad - k + 1;
  if (out_h < 1 || out_w < 1) {
    throw config_error("conv2d spatial dims too small for kernel");
  }

  const std::size_t npix = static_cast<std::size_t>(out_h) * out_w;
  const std::size_t rows = static_cast<std::size_t>(ic) * k * k;
  Tensor<Real> out(input.batch(), oc, out_h, out_w);
  std::vector<Real> cols;
  for (int b = 0; b < input.batch(); ++b) {
    detail::im2col(input, b, k, pad, out_h, out_w, cols);
    for (int o = 0; o < oc; ++o) {
      Real* dst = &out.at(b, o, 0, 0);
      const Real bias = params.bias.at(0, o, 0, 0);
      for (std::size_t i = 0; i < npix; ++i) dst[i] = bias;
      const Real* krow = &kern.at(o, 0, 0, 0);
      for (std::size_t r = 0; r < rows; ++r) {
        const Real kv = krow[r];
        if (kv == Real(0)) continue;
        const Real* src = cols.data() + r * npix;
        for (std::size_t i = 0; i < npix; ++i) dst[i] += kv * src[i];
      }
    }
  }

  if (!out.all_finite()) {
    throw numeric_error(
        "conv2d produced non-finite output at op index " +
        std::to_string(tape ? static_cast<long long>(tape->node_count())
                            : -1));
  }

  const bool rec = tape && (detail::attached(input) ||
                            detail::attached(kern) ||
                            detail::attached(params.bias));
  if (rec) {
    const int in_node = input.node, k_node = kern.node,
              b_node = params.bias.node;
    Tensor<Real> saved_in = input;
    Tensor<Real> saved_k = kern;
    out.node = tape->add_node(
        out.shape(),
        [saved_in, saved_k, in_node, k_node, b_node, pad, out_h,
         out_w](Tape<Real>& t, const Tensor<Real>& g) {
          const int oc = saved_k.batch(), ic = saved_k.channels(),
                    k = saved_k.height();
          const std::size_t npix = static_cast<std::size_t>(out_h) * out_w;
          const std::size_t rows = static_cast<std::size_t>(ic) * k * k;
          Tensor<Real> gk, gb, gin;
          if (k_node != kDetached) gk = Tensor<Real>(saved_k.shape());
          if (b_node != kDetached) gb = Tensor<Real>(1, oc, 1, 1);
          if (in_node != kDetached) gin = Tensor<Real>(saved_in.shape());
          std::vector<Real> cols, gcols;
          for (int b = 0; b < saved_in.batch(); ++b) {
            if (k_node != kDetached || in_node != kDetached) {
              detail::im2col(saved_in, b, k, pad, out_h, out_w, cols);
            }
            if (in_node != kDetached) gcols.assign(rows * npix, Real(0));
            for (int o = 0; o < oc; ++o) {
              const Real* gout = &g.at(b, o, 0, 0);
              if (b_node != kDetached) {
                Real s = 0;
                for (std::size_t i = 0; i < npix; ++i) s += gout[i];
                gb.at(0, o, 0, 0) += s;
              }
              if (k_node != kDetached) {
                Real* gkrow = &gk.at(o, 0, 0, 0);
                for (std::size_t r = 0; r < rows; ++r) {
                  const Real* src = cols.data() + r * npix;
                  Real s = 0;
                  for (std::size_t i = 0; i < npix; ++i) s += gout[i] * src[i];
                  gkrow[r] += s;
                }
              }
              if (in_node != kDetached) {
                const Real* krow = &saved_k.at(o, 0, 0, 0);
                for (std::size_t r = 0; r < rows; ++r) {
                  const Real kv = krow[r];
                  if (kv == Real(0)) continue;
                  Real* dst = gcols.data() + r * npix;
                  for (std::size_t i = 0; i < npix; ++i) dst[i] += kv * gout[i];
                }
              }
            }
            if (in_node != kDetached) {
              detail::col2im_add(gcols, b, k, pad, out_h, out_w, gin);
            }
          }
          if (k_node != kDetached) t.accumulate(k_node, gk);
          if (b_node != kDetached) t.accumulate(b_node, gb);
          if (in_node != kDetached) t.accumulate(in_node, gin);
        },
        saved_in.size() + saved_k.size());
  }
  return out;
}

template <typename Real>
Tensor<Real> leaky_relu(Tape<Real>* tape, const Tensor<Real>& input,
                        Real slope) {
  if (!(slope > Real(0) && slope < Real(1))) {
    throw config_error("leaky_relu slope must be in (0, 1)");
  }
  Tensor<Real> out(input.shape());
  for (std::size_t i = 0; i < input.size(); ++i) {
    const Real v = input.data()[i];
    out.data()[i] = v > Real(0) ? v : slope * v;
  }
  if (tape && detail::attached(input)) {
    const int in_node = input.node;
    Tensor<Real> saved = input;
    out.node = tape->add_node(
        out.shape(),
        [saved, in_node, slope](Tape<Real>& t, const Tensor<Real>& g) {
          Tensor<Real> gin(saved.shape());
          for (std::size_t i = 0; i < saved.size(); ++i) {
            gin.data()[i] =
                g.data()[i] * (saved.data()[i] > Real(0) ? Real(1) : slope);
          }
          t.accumulate(in_node, gin);
        },
        saved.size());
  }
  return out;
}

template <typename Real>
Tensor<Real> concat_channels(Tape<Real>* tape, const Tensor<Real>& a,
                             const Tensor<Real>& b) {
  if (a.batch() != b.batch() || a.height() != b.height() ||
      a.width() != b.width()) {
    throw config_error("concat_channels batch/spatial mismatch: " +
                       a.shape().str() + " vs " + b.shape().str());
  }
  const int ca = a.channels(), cb = b.channels();
  Tensor<Real> out(a.batch(), ca + cb, a.height(), a.width());
  const std::size_t plane = static_cast<std::size_t>(a.height()) * a.width();
  for (int n = 0; n < a.batch(); ++n) {
    std::memcpy(&out.at(n, 0, 0, 0), &a.at(n, 0, 0, 0),
                ca * plane * sizeof(Real));
    std::memcpy(&out.at(n, ca, 0, 0), &b.at(n, 0, 0, 0),
                cb * plane * sizeof(Real));
  }
  if (tape && (detail::attached(a) || detail::attached(b))) {
    const int na = a.node, nb = b.node;
    const Shape sa = a.shape(), sb = b.shape();
    out.node = tape->add_node(
        out.shape(),
        [na, nb, sa, sb, ca, cb, plane](Tape<Real>& t, const Tensor<Real>& g) {
          if (na != kDetached) {
            Tensor<Real> ga(sa);
            for (int n = 0; n < sa.b; ++n) {
              std::memcpy(&ga.at(n, 0, 0, 0), &g.at(n, 0, 0, 0),
                          ca * plane * sizeof(Real));
            }
            t.accumulate(na, ga);
          }
          if (nb != kDetached) {
            Tensor<Real> gb(sb);
            for (int n = 0; n < sb.b; ++n) {
              std::memcpy(&gb.at(n, 0, 0, 0), &g.at(n, ca, 0, 0),
                          cb * plane * sizeof(Real));
            }
            t.accumulate(nb, gb);
          }
        },
        0);
  }
  return out;
}

namespace detail {

// Channel-range view [c0, c0+len) as its own tape node.
template <typename Real>
Tensor<Real> narrow_channels(Tape<Real>* tape, const Tensor<Real>& x, int c0,
                             int len) {
  Tensor<Real> out(x.batch(), len, x.height(), x.width());
  const std::size_t plane = static_cast<std::size_t>(x.height()) * x.width();
  for (int n = 0; n < x.batch(); ++n) {
    std::memcpy(&out.at(n, 0, 0, 0), &x.at(n, c0, 0, 0),
                len * plane * sizeof(Real));
  }
  if (tape && attached(x)) {
    const int nx = x.node;
    const Shape sx = x.shape();
    out.node = tape->add_node(
        out.shape(),
        [nx, sx, c0, len, plane](Tape<Real>& t, const Tensor<Real>& g) {
          Tensor<Real> gx(sx);
          for (int n = 0; n < sx.b; ++n) {
            std::memcpy(&gx.at(n, c0, 0, 0), &g.at(n, 0, 0, 0),
                        len * plane * sizeof(Real));
          }
          t.accumulate(nx, gx);
        },
        0);
  }
  return out;
}

}  // namespace detail

template <typename Real>
std::pair<Tensor<Real>, Tensor<Real>> split_channels(Tape<Real>* tape,
                                                     const Tensor<Real>& x,
                                                     int at) {
  if (at < 1 || at >= x.channels()) {
    throw config_error("split_channels index " + std::to_string(at) +
                       " out of range for " + std::to_string(x.channels()) +
                       " channels");
  }
  return {detail::narrow_channels(tape, x, 0, at),
          detail::narrow_channels(tape, x, at, x.channels() - at)};
}

template <typename Real>
Tensor<Real> upsample_nearest(Tape<Real>* tape, const Tensor<Real>& input,
                              int factor) {
  if (factor < 2) throw config_error("upsample factor must be >= 2");
  const int h = input.height(), w = input.width();
  Tensor<Real> out(input.batch(), input.channels(), h * factor, w * factor);
  for (int b = 0; b < input.batch(); ++b) {
    for (int c = 0; c < input.channels(); ++c) {
      for (int y = 0; y < h * factor; ++y) {
        const Real* src = &input.at(b, c, y / factor, 0);
        Real* dst = &out.at(b, c, y, 0);
        for (int x = 0; x < w * factor; ++x) dst[x] = src[x / factor];
      }
    }
  }
  if (tape && detail::attached(input)) {
    const int in_node = input.node;
    const Shape s = input.shape();
    out.node = tape->add_node(
        out.shape(),
        [in_node, s, factor](Tape<Real>& t, const Tensor<Real>& g) {
          Tensor<Real> gin(s);
          for (int b = 0; b < s.b; ++b) {
            for (int c = 0; c < s.c; ++c) {
              for (int y = 0; y < s.h * factor; ++y) {
                Real* dst = &gin.at(b, c, y / factor, 0);
                const Real* src = &g.at(b, c, y, 0);
                for (int x = 0; x < s.w * factor; ++x) {
                  dst[x / factor] += src[x];
                }
              }
            }
          }
          t.accumulate(in_node, gin);
        },
        0);
  }
  return out;
}

namespace detail {

template <typename Real>
Tensor<Real> pixel_loss(Tape<Real>* tape, const Tensor<Real>& pred,
                        const Tensor<Real>& target, bool squared) {
  if (!(pred.shape() == target.shape())) {
    throw config_error("loss shape mismatch: " + pred.shape().str() + " vs " +
                       target.shape().str());
  }
  const std::size_t n = pred.size();
  Tensor<Real> diff(pred.shape());
  double acc = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const Real d = pred.data()[i] - target.data()[i];
    diff.data()[i] = d;
    acc += squared ? static_cast<double>(d) * d : std::abs(double(d));
  }
  Tensor<Real> out = Tensor<Real>::scalar(static_cast<Real>(acc / n));
  if (tape && (attached(pred) || attached(target))) {
    const int np = pred.node, nt = target.node;
    out.node = tape->add_node(
        out.shape(),
        [diff, np, nt, n, squared](Tape<Real>& t, const Tensor<Real>& g) {
          const Real gs = g.item();
          Tensor<Real> gp(diff.shape());
          for (std::size_t i = 0; i < n; ++i) {
            const Real d = diff.data()[i];
            // L1 subgradient at exact ties is 0.
            const Real s = squared ? Real(2) * d
                                   : (d > Real(0)   ? Real(1)
                                      : d < Real(0) ? Real(-1)
                                                    : Real(0));
            gp.data()[i] = gs * s / static_cast<Real>(n);
          }
          if (np != kDetached) t.accumulate(np, gp);
          if (nt != kDetached) {
            for (std::size_t i = 0; i < n; ++i) gp.data()[i] = -gp.data()[i];
            t.accumulate(nt, gp);
          }
        },
        diff.size());
  }
  return out;
}

}  // namespace detail

// Mean absolute difference over all elements.
template <typename Real>
Tensor<Real> l1_loss(Tape<Real>* tape, const Tensor<Real>& pred,
                     const Tensor<Real>& target) {
  return detail::pixel_loss(tape, pred, target, false);
}

// Mean squared difference; the alternative distance behind the config
// switch.
template <typename Real>
Tensor<Real> l2_loss(Tape<Real>* tape, const Tensor<Real>& pred,
                     const Tensor<Real>& target) {
  return detail::pixel_loss(tape, pred, target, true);
}

// out = sum_i coeffs[i] * terms[i]; the workhorse behind residual adds and
// Runge-Kutta stage arithmetic. Saves nothing for backward.
template <typename Real>
Tensor<Real> lincomb(Tape<Real>* tape, std::span<const Real> coeffs,
                     std::span<const Tensor<Real>* const> terms) {
  if (coeffs.size() != terms.size() || terms.empty()) {
    throw config_error("lincomb needs matching, non-empty coeffs/terms");
  }
  const Shape s = terms[0]->shape();
  for (const auto* t : terms) {
    if (!(t->shape() == s)) {
      throw config_error("lincomb shape mismatch: " + t->shape().str() +
                         " vs " + s.str());
    }
  }
  Tensor<Real> out(s);
  const std::size_t n = out.size();
  for (std::size_t j = 0; j < terms.size(); ++j) {
    const Real c = coeffs[j];
    if (c == Real(0)) continue;
    const Real* src = terms[j]->data();
    Real* dst = out.data();
    for (std::size_t i = 0; i < n; ++i) dst[i] += c * src[i];
  }
  bool any = false;
  for (const auto* t : terms) any = any || detail::attached(*t);
  if (tape && any) {
    std::vector<std::pair<int, Real>> routes;
    for (std::size_t j = 0; j < terms.size(); ++j) {
      if (detail::attached(*terms[j])) routes.push_back({terms[j]->node, coeffs[j]});
    }
    out.node = tape->add_node(
        out.shape(),
        [routes, s](Tape<Real>& t, const Tensor<Real>& g) {
          for (const auto& [node, c] : routes) {
            Tensor<Real> gi(s);
            for (std::size_t i = 0; i < gi.size(); ++i) {
              gi.data()[i] = c * g.data()[i];
            }
            t.accumulate(node, gi);
          }
        },
        0);
  }
  return out;
}

template <typename Real>
Tensor<Real> add(Tape<Real>* tape, const Tensor<Real>& a,
                 const Tensor<Real>& b) {
  const Real cs[] = {Real(1), Real(1)};
  const Tensor<Real>* ts[] = {&a, &b};
  return lincomb<Real>(tape, cs, ts);
}

template <typename Real>
Tensor<Real> scale(Tape<Real>* tape, const Tensor<Real>& a, Real c) {
  const Real cs[] = {c};
  const Tensor<Real>* ts[] = {&a};
  return lincomb<Real>(tape, cs, ts);
}

// out = s * x with s a scalar (1x1x1x1) tensor, typically a parameter.
template <typename Real>
Tensor<Real> mul_scalar(Tape<Real>* tape, const Tensor<Real>& x,
                        const Tensor<Real>& s) {
  const Real sv = s.item();
  Tensor<Real> out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out.data()[i] = sv * x.data()[i];
  if (tape && (detail::attached(x) || detail::attached(s))) {
    const int nx = x.node, ns = s.node;
    Tensor<Real> saved_x = x;
    out.node = tape->add_node(
        out.shape(),
        [saved_x, nx, ns, sv](Tape<Real>& t, const Tensor<Real>& g) {
          if (nx != kDetached) {
            Tensor<Real> gx(saved_x.shape());
            for (std::size_t i = 0; i < gx.size(); ++i) {
              gx.data()[i] = sv * g.data()[i];
            }
            t.accumulate(nx, gx);
          }
          if (ns != kDetached) {
            Real acc = 0;
            for (std::size_t i = 0; i < saved_x.size(); ++i) {
              acc += g.data()[i] * saved_x.data()[i];
            }
            t.accumulate(ns, Tensor<Real>::scalar(acc));
          }
        },
        saved_x.size() + 1);
  }
  return out;
}

// Elementwise sin(freq * x).
template <typename Real>
Tensor<Real> sin_wave(Tape<Real>* tape, const Tensor<Real>& x, Real freq) {
  Tensor<Real> out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    out.data()[i] = std::sin(freq * x.data()[i]);
  }
  if (tape && detail::attached(x)) {
    const int nx = x.node;
    Tensor<Real> saved = x;
    out.node = tape->add_node(
        out.shape(),
        [saved, nx, freq](Tape<Real>& t, const Tensor<Real>& g) {
          Tensor<Real> gx(saved.shape());
          for (std::size_t i = 0; i < gx.size(); ++i) {
            gx.data()[i] = g.data()[i] * freq * std::cos(freq * saved.data()[i]);
          }
          t.accumulate(nx, gx);
        },
        saved.size());
  }
  return out;
}

template <typename Real>
Tensor<Real> reduce_sum(Tape<Real>* tape, const Tensor<Real>& x) {
  Real acc = 0;
  for (std::size_t i = 0; i < x.size(); ++i) acc += x.data()[i];
  Tensor<Real> out = Tensor<Real>::scalar(acc);
  if (tape && detail::attached(x)) {
    const int nx = x.node;
    const Shape s = x.shape();
    out.node = tape->add_node(
        out.shape(),
        [nx, s](Tape<Real>& t, const Tensor<Real>& g) {
          t.accumulate(nx, Tensor<Real>(s, g.item()));
        },
        0);
  }
  return out;
}

template <typename Real>
Tensor<Real> reduce_mean(Tape<Real>* tape, const Tensor<Real>& x) {
  Tensor<Real> s = reduce_sum(tape, x);
  return scale(tape, s, Real(1) / static_cast<Real>(x.size()));
}

// Scalar <x, w> with constant weights.
template <typename Real>
Tensor<Real> dot_const(Tape<Real>* tape, const Tensor<Real>& x,
                       const Tensor<Real>& w) {
  if (!(x.shape() == w.shape())) {
    throw config_error("dot_const shape mismatch");
  }
  Real acc = 0;
  for (std::size_t i = 0; i < x.size(); ++i) acc += x.data()[i] * w.data()[i];
  Tensor<Real> out = Tensor<Real>::scalar(acc);
  if (tape && detail::attached(x)) {
    const int nx = x.node;
    Tensor<Real> saved_w = w;
    out.node = tape->add_node(
        out.shape(),
        [nx, saved_w](Tape<Real>& t, const Tensor<Real>& g) {
          Tensor<Real> gx(saved_w.shape());
          const Real gs = g.item();
          for (std::size_t i = 0; i < gx.size(); ++i) {
            gx.data()[i] = gs * saved_w.data()[i];
          }
          t.accumulate(nx, gx);
        },
        saved_w.size());
  }
  return out;
}

// Constant single-channel plane filled with the current integration time.
template <typename Real>
Tensor<Real> time_channel(const Tensor<Real>& like, Real t) {
  return Tensor<Real>(like.batch(), 1, like.height(), like.width(), t);
}

}  // namespace odesr
