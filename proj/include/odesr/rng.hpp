// Deterministic random source. Distributions are hand-rolled on top of
// mt19937_64 because the standard library's distribution objects are
// implementation-defined; byte-reproducible runs need fixed algorithms.
#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "odesr/tensor.hpp"

namespace odesr {

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  // [0, 1) with 53 random bits.
  double uniform() {
    return double(gen_() >> 11) * 0x1.0p-53;
  }

  // Standard normal via Box-Muller; second value cached.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform(), u2 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

  // Uniform in [0, n), bias-free by rejection.
  std::uint64_t below(std::uint64_t n) {
    const std::uint64_t bound = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x = gen_();
    while (x >= bound) x = gen_();
    return x % n;
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::swap(v[i - 1], v[below(i)]);
    }
  }

 private:
  std::mt19937_64 gen_;
  double spare_ = 0;
  bool has_spare_ = false;
};

template <typename Real>
Tensor<Real> random_uniform(Rng& rng, const Shape& s, Real lo, Real hi) {
  Tensor<Real> t(s);
  for (std::size_t i = 0; i < t.size(); ++i) {
    t.data()[i] = lo + static_cast<Real>(rng.uniform()) * (hi - lo);
  }
  return t;
}

template <typename Real>
Tensor<Real> random_normal(Rng& rng, const Shape& s, Real stddev) {
  Tensor<Real> t(s);
  for (std::size_t i = 0; i < t.size(); ++i) {
    t.data()[i] = static_cast<Real>(rng.normal()) * stddev;
  }
  return t;
}

}  // namespace odesr
