// Image-domain utilities for the x4 super-resolution pipeline: bicubic
// resampling (the degradation model and the classical baseline), PSNR, and
// aligned HR/LR patch extraction. Nothing here is differentiated; tensors
// are plain (1, 3, H, W) images in [0,1].
#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "odesr/errors.hpp"
#include "odesr/tensor.hpp"

namespace odesr {

// "Bicubic" is ambiguous across tools; this is the near-universal a = -0.5
// Keys kernel, antialiased on downscale by stretching the kernel by the
// scale ratio, edges handled by clamping the sample index.
inline constexpr double kBicubicA = -0.5;

// Identical images have MSE 0; report this instead of infinity.
inline constexpr double kPsnrCapDb = 100.0;

namespace detail {

inline double cubic_weight(double x) {
  constexpr double a = kBicubicA;
  x = std::abs(x);
  if (x < 1.0) return ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0;
  if (x < 2.0) return a * (((x - 5.0) * x + 8.0) * x - 4.0);
  return 0.0;
}

struct ResampleTap {
  int start = 0;                 // first input index (may fall off-edge)
  std::vector<double> weights;   // normalized to sum exactly 1
};

// Tap table for resampling a length-in_n axis to out_n. Output center o maps
// to input coordinate (o + 0.5) * in_n / out_n - 0.5; the kernel is
// stretched by the ratio when downscaling so it antialiases.
inline std::vector<ResampleTap> resample_taps(int in_n, int out_n) {
  if (in_n < 1 || out_n < 1) {
    throw config_error("resample_taps: axis lengths must be positive");
  }
  const double ratio = double(in_n) / double(out_n);
  const double fscale = std::max(ratio, 1.0);
  const double support = 2.0 * fscale;
  std::vector<ResampleTap> taps(out_n);
  for (int o = 0; o < out_n; ++o) {
    const double c = (o + 0.5) * ratio - 0.5;
    const int lo = static_cast<int>(std::ceil(c - support));
    const int hi = static_cast<int>(std::floor(c + support));
    ResampleTap& t = taps[o];
    t.start = lo;
    t.weights.resize(hi - lo + 1);
    double sum = 0;
    for (int i = lo; i <= hi; ++i) {
      const double w = cubic_weight((i - c) / fscale);
      t.weights[i - lo] = w;
      sum += w;
    }
    for (double& w : t.weights) w /= sum;
  }
  return taps;
}

}  // namespace detail

// Separable bicubic resize of an image batch to (out_h, out_w), clipped to
// [0,1] afterwards (these are display-domain images).
template <typename Real>
Tensor<Real> bicubic_resize(const Tensor<Real>& img, int out_h, int out_w) {
  const int N = img.batch(), C = img.channels();
  const int H = img.height(), W = img.width();
  const auto tx = detail::resample_taps(W, out_w);
  const auto ty = detail::resample_taps(H, out_h);

  Tensor<Real> mid(N, C, H, out_w);
  for (int n = 0; n < N; ++n) {
    for (int ch = 0; ch < C; ++ch) {
      for (int y = 0; y < H; ++y) {
        const Real* src = &img.at(n, ch, y, 0);
        for (int x = 0; x < out_w; ++x) {
          const detail::ResampleTap& t = tx[x];
          double acc = 0;
          for (std::size_t j = 0; j < t.weights.size(); ++j) {
            const int i = std::clamp(t.start + int(j), 0, W - 1);
            acc += t.weights[j] * double(src[i]);
          }
          mid.at(n, ch, y, x) = Real(acc);
        }
      }
    }
  }

  Tensor<Real> out(N, C, out_h, out_w);
  for (int n = 0; n < N; ++n) {
    for (int ch = 0; ch < C; ++ch) {
      for (int y = 0; y < out_h; ++y) {
        const detail::ResampleTap& t = ty[y];
        for (int x = 0; x < out_w; ++x) {
          double acc = 0;
          for (std::size_t j = 0; j < t.weights.size(); ++j) {
            const int i = std::clamp(t.start + int(j), 0, H - 1);
            acc += t.weights[j] * double(mid.at(n, ch, i, x));
          }
          out.at(n, ch, y, x) = Real(std::clamp(acc, 0.0, 1.0));
        }
      }
    }
  }
  return out;
}

template <typename Real>
Tensor<Real> bicubic_downsample(const Tensor<Real>& img, int factor) {
  if (factor < 1) throw config_error("bicubic_downsample: factor must be >= 1");
  if (img.height() % factor != 0 || img.width() % factor != 0) {
    throw config_error("bicubic_downsample: dims " +
                       std::to_string(img.height()) + "x" +
                       std::to_string(img.width()) +
                       " not divisible by factor " + std::to_string(factor) +
                       " (crop first)");
  }
  return bicubic_resize(img, img.height() / factor, img.width() / factor);
}

template <typename Real>
Tensor<Real> bicubic_upsample(const Tensor<Real>& img, int factor) {
  if (factor < 1) throw config_error("bicubic_upsample: factor must be >= 1");
  return bicubic_resize(img, img.height() * factor, img.width() * factor);
}

// 10*log10(peak^2 / MSE) over every element; exact-zero MSE reports the cap.
template <typename Real>
double psnr(const Tensor<Real>& a, const Tensor<Real>& b, double peak = 1.0) {
  if (!(a.shape() == b.shape())) {
    throw config_error("psnr shape mismatch: " + a.shape().str() + " vs " +
                       b.shape().str());
  }
  if (!(peak > 0)) throw config_error("psnr: peak must be positive");
  double acc = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = double(a.data()[i]) - double(b.data()[i]);
    acc += d * d;
  }
  const double mse = acc / double(a.size());
  if (mse == 0.0) return kPsnrCapDb;
  return 10.0 * std::log10(peak * peak / mse);
}

template <typename Real>
Tensor<Real> crop(const Tensor<Real>& t, int y0, int x0, int h, int w) {
  if (y0 < 0 || x0 < 0 || h < 1 || w < 1 || y0 + h > t.height() ||
      x0 + w > t.width()) {
    throw config_error("crop window out of bounds");
  }
  Tensor<Real> out(t.batch(), t.channels(), h, w);
  for (int n = 0; n < t.batch(); ++n) {
    for (int c = 0; c < t.channels(); ++c) {
      for (int y = 0; y < h; ++y) {
        const Real* src = &t.at(n, c, y0 + y, x0);
        std::copy(src, src + w, &out.at(n, c, y, 0));
      }
    }
  }
  return out;
}

// Floors both spatial dims to multiples of m (top-left anchored).
template <typename Real>
Tensor<Real> crop_to_multiple(const Tensor<Real>& t, int m) {
  const int h = (t.height() / m) * m, w = (t.width() / m) * m;
  if (h < 1 || w < 1) {
    throw config_error("image smaller than one multiple of " +
                       std::to_string(m));
  }
  if (h == t.height() && w == t.width()) return t;
  return crop(t, 0, 0, h, w);
}

template <typename Real>
struct ImagePair {
  Tensor<Real> hr;  // (1, 3, H, W), H and W divisible by the scale
  Tensor<Real> lr;  // (1, 3, H/scale, W/scale)
  std::string source_id;
};

// Crops HR to a multiple of `factor` and synthesizes LR by bicubic
// degradation — the supervised x4 setting.
template <typename Real>
ImagePair<Real> make_image_pair(const Tensor<Real>& hr, std::string id,
                                int factor = 4) {
  ImagePair<Real> p;
  p.hr = crop_to_multiple(hr, factor);
  p.lr = bicubic_downsample(p.hr, factor);
  p.source_id = std::move(id);
  return p;
}

// Aligned HR/LR patch grid; partial edge patches are discarded, so a patch
// larger than the image yields an empty list. Patch ids carry the HR
// coordinates ("id#y,x") so grids are reconstructible.
template <typename Real>
std::vector<ImagePair<Real>> extract_patches(const ImagePair<Real>& pair,
                                             int hr_patch, int stride) {
  if (stride < 1) throw config_error("extract_patches: stride must be >= 1");
  const int H = pair.hr.height(), W = pair.hr.width();
  if (pair.lr.height() < 1 || H % pair.lr.height() != 0) {
    throw config_error("extract_patches: HR/LR dims are not an integer scale");
  }
  const int scale = H / pair.lr.height();
  if (hr_patch < scale || hr_patch % scale != 0) {
    throw config_error("extract_patches: patch size " +
                       std::to_string(hr_patch) +
                       " not divisible by scale " + std::to_string(scale));
  }
  std::vector<ImagePair<Real>> out;
  if (hr_patch > H || hr_patch > W) return out;
  for (int y = 0; y + hr_patch <= H; y += stride) {
    for (int x = 0; x + hr_patch <= W; x += stride) {
      ImagePair<Real> p;
      p.hr = crop(pair.hr, y, x, hr_patch, hr_patch);
      p.lr = crop(pair.lr, y / scale, x / scale, hr_patch / scale,
                  hr_patch / scale);
      p.source_id = pair.source_id + "#" + std::to_string(y) + "," +
                    std::to_string(x);
      out.push_back(std::move(p));
    }
  }
  return out;
}

}  // namespace odesr
