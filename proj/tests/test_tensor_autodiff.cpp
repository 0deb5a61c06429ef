// Autodiff layer tests. The reference implementations here are deliberately
// naive (dense loops, central differences); the library must match them, not
// the other way around.
#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "odesr/grad_check.hpp"
#include "odesr/ops.hpp"
#include "odesr/rng.hpp"
#include "odesr/tape.hpp"
#include "odesr/tensor.hpp"

using namespace odesr;

namespace {

// Dense six-loop convolution, the oracle conv2d is judged against.
template <typename Real>
Tensor<Real> conv_oracle(const Tensor<Real>& in, const ConvParams<Real>& p) {
  const auto& k = p.kernel;
  const int oc = k.batch(), ic = k.channels(), kh = k.height(), kw = k.width();
  const int pad = p.padding;
  const int oh = in.height() + 2 * pad - kh + 1;
  const int ow = in.width() + 2 * pad - kw + 1;
  Tensor<Real> out(in.batch(), oc, oh, ow);
  for (int b = 0; b < in.batch(); ++b) {
    for (int o = 0; o < oc; ++o) {
      for (int y = 0; y < oh; ++y) {
        for (int x = 0; x < ow; ++x) {
          Real acc = p.bias.at(0, o, 0, 0);
          for (int c = 0; c < ic; ++c) {
            for (int ky = 0; ky < kh; ++ky) {
              for (int kx = 0; kx < kw; ++kx) {
                const int iy = y + ky - pad, ix = x + kx - pad;
                if (iy < 0 || iy >= in.height() || ix < 0 || ix >= in.width()) {
                  continue;
                }
                acc += in.at(b, c, iy, ix) * k.at(o, c, ky, kx);
              }
            }
          }
          out.at(b, o, y, x) = acc;
        }
      }
    }
  }
  return out;
}

ConvParams<double> random_conv(Rng& rng, int out_c, int in_c, int k, int pad) {
  ConvParams<double> p = ConvParams<double>::zeros(out_c, in_c, k, pad);
  p.kernel = random_normal<double>(rng, p.kernel.shape(), 0.5);
  p.bias = random_normal<double>(rng, p.bias.shape(), 0.5);
  return p;
}

}  // namespace

TEST_CASE("conv2d matches the dense nested-loop oracle") {
  Rng rng(11);
  struct Case {
    int b, c, h, w, oc, k, pad;
  };
  // Every kernel/padding combination the generators use, plus one
  // off-pattern case to exercise shape arithmetic.
  const Case cases[] = {
      {2, 3, 8, 8, 5, 3, 1}, {1, 4, 6, 7, 2, 1, 0},
      {2, 2, 9, 5, 3, 3, 0}, {1, 5, 8, 8, 4, 5, 2},
  };
  for (const auto& cs : cases) {
    Tensor<double> in =
        random_uniform<double>(rng, {cs.b, cs.c, cs.h, cs.w}, -1.0, 1.0);
    ConvParams<double> p = random_conv(rng, cs.oc, cs.c, cs.k, cs.pad);
    Tensor<double> got = conv2d<double>(nullptr, in, p);
    Tensor<double> want = conv_oracle(in, p);
    REQUIRE(got.shape() == want.shape());
    REQUIRE(max_abs_diff(got, want) < 1e-12);
  }
}

TEST_CASE("conv2d rejects channel mismatch") {
  Tensor<double> in(1, 3, 4, 4, 0.5);
  ConvParams<double> p = ConvParams<double>::zeros(2, 4, 3, 1);
  REQUIRE_THROWS_AS(conv2d<double>(nullptr, in, p), config_error);
}

TEST_CASE("conv2d gradients match central finite differences") {
  Rng rng(12);
  Tensor<double> in = random_uniform<double>(rng, {2, 3, 6, 6}, -1.0, 1.0);
  ConvParams<double> p = random_conv(rng, 4, 3, 3, 1);
  Tensor<double> target = random_uniform<double>(rng, {2, 4, 6, 6}, -1.0, 1.0);

  Tape<double> tape;
  Tensor<double> tin = in, tk = p.kernel, tb = p.bias;
  tape.watch(tin);
  tape.watch(tk);
  tape.watch(tb);
  ConvParams<double> tp{tk, tb, p.padding};
  Tensor<double> loss = l2_loss<double>(&tape, conv2d<double>(&tape, tin, tp), target);
  tape.backward(loss.node);

  auto loss_at = [&](const Tensor<double>& x, int which) {
    ConvParams<double> q = p;
    Tensor<double> i2 = in;
    if (which == 0) i2 = x;
    if (which == 1) q.kernel = x;
    if (which == 2) q.bias = x;
    Tensor<double> out = conv2d<double>(nullptr, i2, q);
    return l2_loss<double>(nullptr, out, target).item();
  };
  const double h = 1e-5;
  for (int which = 0; which < 3; ++which) {
    const Tensor<double>& at = which == 0 ? in : (which == 1 ? p.kernel : p.bias);
    const int node = which == 0 ? tin.node : (which == 1 ? tk.node : tb.node);
    Tensor<double> fd = finite_difference_gradient<double>(
        [&](const Tensor<double>& x) { return loss_at(x, which); }, at, h);
    REQUIRE(max_rel_error(tape.gradient(node), fd, 1e-8) < 1e-6);
  }
}

TEST_CASE("leaky_relu values and gradient") {
  Tensor<double> x = Tensor<double>::from({1, 1, 1, 3}, {2.0, -1.0, -3.0});
  Tensor<double> y = leaky_relu<double>(nullptr, x, 0.2);
  REQUIRE(y.at(0, 0, 0, 0) == 2.0);
  REQUIRE(y.at(0, 0, 0, 1) == -0.2);

  Tape<double> tape;
  tape.watch(x);
  Tensor<double> s = reduce_sum<double>(&tape, leaky_relu<double>(&tape, x, 0.2));
  tape.backward(s.node);
  Tensor<double> g = tape.gradient(x.node);
  REQUIRE(g.at(0, 0, 0, 2) == 0.2);

  Tensor<double> fd = finite_difference_gradient<double>(
      [](const Tensor<double>& v) {
        Tensor<double> r = leaky_relu<double>(nullptr, v, 0.2);
        double acc = 0;
        for (std::size_t i = 0; i < r.size(); ++i) acc += r.data()[i];
        return acc;
      },
      x, 1e-5);
  REQUIRE(max_rel_error(g, fd, 1e-8) < 1e-6);

  REQUIRE_THROWS_AS(leaky_relu<double>(nullptr, x, 1.5), config_error);
}

TEST_CASE("concat and split are exact inverses with correct routing") {
  Rng rng(13);
  Tensor<double> a = random_uniform<double>(rng, {2, 64, 4, 4}, 0.0, 1.0);
  Tensor<double> b = random_uniform<double>(rng, {2, 1, 4, 4}, 0.0, 1.0);

  Tensor<double> cat = concat_channels<double>(nullptr, a, b);
  REQUIRE(cat.channels() == 65);
  auto [fa, fb] = split_channels<double>(nullptr, cat, 64);
  REQUIRE(fa.same_values(a));
  REQUIRE(fb.same_values(b));

  Tensor<double> cat2 =
      concat_channels<double>(nullptr, fa, fb);
  REQUIRE(cat2.same_values(cat));

  // A loss reading only the first half leaves the appended channel with a
  // zero gradient.
  Tape<double> tape;
  tape.watch(a);
  tape.watch(b);
  Tensor<double> tcat = concat_channels<double>(&tape, a, b);
  auto [ha, hb] = split_channels<double>(&tape, tcat, 64);
  Tensor<double> loss = reduce_sum<double>(&tape, ha);
  tape.backward(loss.node);
  Tensor<double> ga = tape.gradient(a.node);
  Tensor<double> gb = tape.gradient(b.node);
  for (std::size_t i = 0; i < ga.size(); ++i) REQUIRE(ga.data()[i] == 1.0);
  for (std::size_t i = 0; i < gb.size(); ++i) REQUIRE(gb.data()[i] == 0.0);

  Tensor<double> bad(1, 1, 3, 4, 0.0);
  REQUIRE_THROWS_AS(concat_channels<double>(nullptr, a, bad), config_error);
}

TEST_CASE("upsample_nearest replication, backward block sum, composition") {
  Tensor<double> in = Tensor<double>::from({1, 1, 2, 2}, {1, 2, 3, 4});
  Tensor<double> up = upsample_nearest<double>(nullptr, in, 2);
  REQUIRE(up.height() == 4);
  REQUIRE(up.at(0, 0, 0, 0) == 1.0);
  REQUIRE(up.at(0, 0, 0, 1) == 1.0);
  REQUIRE(up.at(0, 0, 1, 1) == 1.0);
  REQUIRE(up.at(0, 0, 2, 3) == 4.0);
  REQUIRE(up.at(0, 0, 3, 2) == 4.0);

  Tape<double> tape;
  tape.watch(in);
  Tensor<double> s = reduce_sum<double>(&tape, upsample_nearest<double>(&tape, in, 2));
  tape.backward(s.node);
  Tensor<double> g = tape.gradient(in.node);
  for (std::size_t i = 0; i < g.size(); ++i) REQUIRE(g.data()[i] == 4.0);

  Tensor<double> twice =
      upsample_nearest<double>(nullptr, upsample_nearest<double>(nullptr, in, 2), 2);
  Tensor<double> once = upsample_nearest<double>(nullptr, in, 4);
  REQUIRE(twice.same_values(once));
}

TEST_CASE("l1_loss values and subgradient") {
  Tensor<double> a(1, 2, 3, 3, 0.0);
  Tensor<double> b(1, 2, 3, 3, 0.5);
  REQUIRE(l1_loss<double>(nullptr, a, a).item() == 0.0);
  REQUIRE(l1_loss<double>(nullptr, a, b).item() == Catch::Approx(0.5).epsilon(1e-12));

  Rng rng(14);
  Tensor<double> pred = random_uniform<double>(rng, {1, 2, 4, 4}, -1.0, 1.0);
  Tensor<double> target = random_uniform<double>(rng, {1, 2, 4, 4}, -1.0, 1.0);
  Tape<double> tape;
  tape.watch(pred);
  Tensor<double> loss = l1_loss<double>(&tape, pred, target);
  tape.backward(loss.node);
  Tensor<double> fd = finite_difference_gradient<double>(
      [&](const Tensor<double>& x) {
        return l1_loss<double>(nullptr, x, target).item();
      },
      pred, 1e-7);
  REQUIRE(max_rel_error(tape.gradient(pred.node), fd, 1e-8) < 1e-6);

  // Exact tie: subgradient pinned to zero.
  Tape<double> t2;
  Tensor<double> p2(1, 1, 1, 1, 0.25);
  t2.watch(p2);
  Tensor<double> l2 = l1_loss<double>(&t2, p2, Tensor<double>(1, 1, 1, 1, 0.25));
  t2.backward(l2.node);
  REQUIRE(t2.gradient(p2.node).item() == 0.0);

  REQUIRE_THROWS_AS(l1_loss<double>(nullptr, a, Tensor<double>(1, 1, 1, 1, 0.0)),
                    config_error);
}

TEST_CASE("backward: identity chain, composite graph vs finite differences") {
  Tape<double> tape;
  Tensor<double> x = Tensor<double>::scalar(3.5);
  tape.watch(x);
  Tensor<double> y = scale<double>(&tape, x, 1.0);
  tape.backward(y.node);
  REQUIRE(tape.gradient(x.node).item() == 1.0);

  Rng rng(15);
  Tensor<double> in = random_uniform<double>(rng, {2, 3, 6, 6}, -1.0, 1.0);
  ConvParams<double> p = random_conv(rng, 4, 3, 3, 1);
  Tensor<double> target = random_uniform<double>(rng, {2, 4, 6, 6}, 0.0, 1.0);

  Tape<double> t;
  Tensor<double> k = p.kernel;
  t.watch(k);
  ConvParams<double> tp{k, p.bias, p.padding};
  Tensor<double> out = leaky_relu<double>(&t, conv2d<double>(&t, in, tp), 0.2);
  Tensor<double> loss = l1_loss<double>(&t, out, target);
  t.backward(loss.node);

  Tensor<double> fd = finite_difference_gradient<double>(
      [&](const Tensor<double>& kk) {
        ConvParams<double> q = p;
        q.kernel = kk;
        Tensor<double> o = leaky_relu<double>(nullptr, conv2d<double>(nullptr, in, q), 0.2);
        return l1_loss<double>(nullptr, o, target).item();
      },
      p.kernel, 1e-5);
  REQUIRE(max_rel_error(t.gradient(k.node), fd, 1e-8) < 1e-6);
}

TEST_CASE("disconnected parameters get exactly zero gradient") {
  Tape<double> tape;
  Tensor<double> used(1, 1, 2, 2, 1.5);
  Tensor<double> unused(1, 1, 2, 2, -2.0);
  tape.watch(used);
  tape.watch(unused);
  Tensor<double> loss = reduce_sum<double>(&tape, used);
  tape.backward(loss.node);
  Tensor<double> g = tape.gradient(unused.node);
  for (std::size_t i = 0; i < g.size(); ++i) REQUIRE(g.data()[i] == 0.0);
}

TEST_CASE("weight sharing accumulates rather than overwrites") {
  Rng rng(16);
  Tensor<double> in = random_uniform<double>(rng, {1, 2, 5, 5}, -1.0, 1.0);
  ConvParams<double> p = random_conv(rng, 2, 2, 3, 1);

  // Shared: the same kernel applied twice in a chain.
  Tape<double> shared;
  Tensor<double> k = p.kernel;
  shared.watch(k);
  ConvParams<double> sp{k, p.bias, p.padding};
  Tensor<double> y1 = conv2d<double>(&shared, in, sp);
  Tensor<double> y2 = conv2d<double>(&shared, y1, sp);
  Tensor<double> sl = reduce_sum<double>(&shared, y2);
  shared.backward(sl.node);
  Tensor<double> g_shared = shared.gradient(k.node);

  // Independent copies: gradient of each use, summed by hand.
  Tape<double> split;
  Tensor<double> ka = p.kernel, kb = p.kernel;
  split.watch(ka);
  split.watch(kb);
  ConvParams<double> pa{ka, p.bias, p.padding}, pb{kb, p.bias, p.padding};
  Tensor<double> z1 = conv2d<double>(&split, in, pa);
  Tensor<double> z2 = conv2d<double>(&split, z1, pb);
  Tensor<double> zl = reduce_sum<double>(&split, z2);
  split.backward(zl.node);
  Tensor<double> ga = split.gradient(ka.node);
  Tensor<double> gb = split.gradient(kb.node);
  for (std::size_t i = 0; i < ga.size(); ++i) {
    ga.data()[i] += gb.data()[i];
  }
  REQUIRE(max_rel_error(g_shared, ga, 1e-12) < 1e-12);
}

TEST_CASE("finite_difference_gradient sanity") {
  Tensor<double> theta = Tensor<double>::scalar(3.0);
  Tensor<double> g = finite_difference_gradient<double>(
      [](const Tensor<double>& t) { return t.item() * t.item(); }, theta, 1e-5);
  REQUIRE(std::abs(g.item() - 6.0) < 1e-8);

  Tensor<double> c = finite_difference_gradient<double>(
      [](const Tensor<double>&) { return 42.0; }, theta, 1e-5);
  REQUIRE(std::abs(c.item()) < 1e-10);
}

TEST_CASE("primitive gradients on larger random shapes match finite differences") {
  Rng rng(17);
  Tensor<double> in = random_uniform<double>(rng, {2, 8, 16, 16}, -1.0, 1.0);
  ConvParams<double> p = random_conv(rng, 8, 8, 3, 1);
  Tensor<double> target = random_uniform<double>(rng, {2, 4, 16, 16}, 0.0, 1.0);

  Tape<double> tape;
  Tensor<double> k = p.kernel;
  tape.watch(k);
  ConvParams<double> tp{k, p.bias, p.padding};
  Tensor<double> y = conv2d<double>(&tape, in, tp);
  y = leaky_relu<double>(&tape, y, 0.2);
  auto [top, bottom] = split_channels<double>(&tape, y, 4);
  Tensor<double> merged = add<double>(&tape, top, bottom);
  merged = upsample_nearest<double>(&tape, merged, 2);
  // merged is 2x4x32x32; compare against an 8-channel-sized target by
  // folding once more.
  auto [l, r] = split_channels<double>(&tape, merged, 2);
  Tensor<double> joined = concat_channels<double>(&tape, r, l);
  Tensor<double> small = leaky_relu<double>(&tape, joined, 0.2);
  Tensor<double> loss = l2_loss<double>(
      &tape, small, upsample_nearest<double>(nullptr, target, 2));
  tape.backward(loss.node);

  Tensor<double> fd = finite_difference_gradient<double>(
      [&](const Tensor<double>& kk) {
        ConvParams<double> q = p;
        q.kernel = kk;
        Tensor<double> v = conv2d<double>(nullptr, in, q);
        v = leaky_relu<double>(nullptr, v, 0.2);
        auto [a2, b2] = split_channels<double>(nullptr, v, 4);
        Tensor<double> m = add<double>(nullptr, a2, b2);
        m = upsample_nearest<double>(nullptr, m, 2);
        auto [l2v, r2v] = split_channels<double>(nullptr, m, 2);
        Tensor<double> j = concat_channels<double>(nullptr, r2v, l2v);
        Tensor<double> sm = leaky_relu<double>(nullptr, j, 0.2);
        return l2_loss<double>(nullptr, sm,
                               upsample_nearest<double>(nullptr, target, 2))
            .item();
      },
      p.kernel, 1e-5);
  // The mean loss sums ~8k terms, so each evaluation carries up to ~1e-9 of
  // accumulation roundoff; divided by 2h that is ~5e-5 relative noise on the
  // finite-difference side. Tight 1e-6 agreement is pinned by the small-shape
  // per-op tests above.
  REQUIRE(max_rel_error(tape.gradient(k.node), fd, 1e-6) < 1e-4);
}

TEST_CASE("backward on a cleared tape is a state error") {
  Tape<double> tape;
  Tensor<double> x = Tensor<double>::scalar(1.0);
  tape.watch(x);
  Tensor<double> y = scale<double>(&tape, x, 2.0);
  tape.clear();
  REQUIRE_THROWS_AS(tape.backward(y.node), state_error);
}

TEST_CASE("tape truncate drops nodes and their saved values") {
  Tape<double> tape;
  Tensor<double> x(1, 1, 2, 2, 1.0);
  tape.watch(x);
  Tensor<double> y = leaky_relu<double>(&tape, x, 0.2);
  const std::size_t mark = tape.node_count();
  const std::size_t saved = tape.saved_values();
  Tensor<double> z = leaky_relu<double>(&tape, y, 0.2);
  (void)z;
  REQUIRE(tape.node_count() > mark);
  tape.truncate(mark);
  REQUIRE(tape.node_count() == mark);
  REQUIRE(tape.saved_values() == saved);

  // The kept prefix still backprops.
  tape.backward(y.node, Tensor<double>(1, 1, 2, 2, 1.0));
  REQUIRE(tape.gradient(x.node).at(0, 0, 0, 0) == 1.0);
}

TEST_CASE("mul_scalar and sin_wave gradients") {
  Rng rng(18);
  Tensor<double> x = random_uniform<double>(rng, {1, 2, 3, 3}, -2.0, 2.0);
  Tensor<double> s = Tensor<double>::scalar(0.7);

  Tape<double> tape;
  tape.watch(x);
  tape.watch(s);
  Tensor<double> y = mul_scalar<double>(&tape, sin_wave<double>(&tape, x, 3.0), s);
  Tensor<double> loss = reduce_mean<double>(&tape, y);
  tape.backward(loss.node);

  Tensor<double> fdx = finite_difference_gradient<double>(
      [&](const Tensor<double>& v) {
        Tensor<double> r =
            mul_scalar<double>(nullptr, sin_wave<double>(nullptr, v, 3.0), s);
        return reduce_mean<double>(nullptr, r).item();
      },
      x, 1e-6);
  REQUIRE(max_rel_error(tape.gradient(x.node), fdx, 1e-8) < 1e-6);

  Tensor<double> fds = finite_difference_gradient<double>(
      [&](const Tensor<double>& v) {
        Tensor<double> r =
            mul_scalar<double>(nullptr, sin_wave<double>(nullptr, x, 3.0), v);
        return reduce_mean<double>(nullptr, r).item();
      },
      s, 1e-6);
  REQUIRE(max_rel_error(tape.gradient(s.node), fds, 1e-8) < 1e-6);
}
