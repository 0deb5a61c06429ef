// 4-D (batch, channels, height, width) tensors over a run-level precision.
// A tensor optionally carries a node handle into the active gradient tape;
// a detached tensor (node < 0) acts as a constant and never receives a
// gradient.
#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "odesr/errors.hpp"

namespace odesr {

struct Shape {
  int b = 0;
  int c = 0;
  int h = 0;
  int w = 0;

  bool operator==(const Shape&) const = default;

  std::size_t count() const {
    return static_cast<std::size_t>(b) * c * h * w;
  }

  std::string str() const {
    return std::to_string(b) + "x" + std::to_string(c) + "x" +
           std::to_string(h) + "x" + std::to_string(w);
  }
};

inline constexpr int kDetached = -1;

template <typename Real>
class Tensor {
 public:
  Tensor() = default;

  Tensor(int b, int c, int h, int w, Real value = Real(0))
      : Tensor(Shape{b, c, h, w}, value) {}

  explicit Tensor(const Shape& s, Real value = Real(0)) : shape_(s) {
    if (s.b < 1 || s.c < 1 || s.h < 1 || s.w < 1) {
      throw config_error("tensor shape components must be >= 1, got " +
                         s.str());
    }
    data_.assign(s.count(), value);
  }

  static Tensor from(const Shape& s, std::vector<Real> values) {
    Tensor t(s);
    if (values.size() != t.size()) {
      throw config_error("value count " + std::to_string(values.size()) +
                         " does not match shape " + s.str());
    }
    t.data_ = std::move(values);
    return t;
  }

  static Tensor scalar(Real value) { return Tensor(1, 1, 1, 1, value); }

  bool empty() const { return data_.empty(); }
  const Shape& shape() const { return shape_; }
  int batch() const { return shape_.b; }
  int channels() const { return shape_.c; }
  int height() const { return shape_.h; }
  int width() const { return shape_.w; }
  std::size_t size() const { return data_.size(); }

  Real* data() { return data_.data(); }
  const Real* data() const { return data_.data(); }

  Real& at(int b, int c, int y, int x) {
    return data_[index(b, c, y, x)];
  }
  const Real& at(int b, int c, int y, int x) const {
    return data_[index(b, c, y, x)];
  }

  Real item() const {
    if (size() != 1) {
      throw config_error("item() on non-scalar tensor " + shape_.str());
    }
    return data_[0];
  }

  void fill(Real v) { data_.assign(data_.size(), v); }

  bool all_finite() const {
    for (Real v : data_) {
      if (!std::isfinite(static_cast<double>(v))) return false;
    }
    return true;
  }

  bool same_values(const Tensor& other) const {
    return shape_ == other.shape_ && data_ == other.data_;
  }

  // Handle into the active tape; kDetached when not recorded.
  int node = kDetached;

 private:
  std::size_t index(int b, int c, int y, int x) const {
    return ((static_cast<std::size_t>(b) * shape_.c + c) * shape_.h + y) *
               shape_.w +
           x;
  }

  Shape shape_{};
  std::vector<Real> data_;
};

// Explicit finiteness check; numeric errors are raised here rather than
// silently masked.
template <typename Real>
void check_finite(const Tensor<Real>& t, const std::string& what) {
  if (!t.all_finite()) {
    throw numeric_error("non-finite values in " + what);
  }
}

template <typename Real>
Real max_abs_diff(const Tensor<Real>& a, const Tensor<Real>& b) {
  if (!(a.shape() == b.shape())) {
    throw config_error("max_abs_diff shape mismatch: " + a.shape().str() +
                       " vs " + b.shape().str());
  }
  Real m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
  }
  return m;
}

}  // namespace odesr
