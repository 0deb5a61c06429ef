// 8-bit RGB PNG in/out on top of libpng. Loads map bytes to [0,1] by /255;
// saves round half-up, so save-then-load moves any element by at most 1/510.
#pragma once

#include <png.h>

#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include "odesr/errors.hpp"
#include "odesr/tensor.hpp"

namespace odesr {

namespace detail {

// Failures surface as io_error with the path; keep libpng quiet.
inline void png_error_fn(png_structp png, png_const_charp) {
  png_longjmp(png, 1);
}
inline void png_warn_fn(png_structp, png_const_charp) {}

}  // namespace detail

// Decodes to (1, 3, H, W). Palette, grayscale, sub-8-bit, 16-bit, and
// alpha-carrying files are normalized to 8-bit RGB on the way in.
template <typename Real>
Tensor<Real> load_png(const std::string& path) {
  FILE* fp = std::fopen(path.c_str(), "rb");
  if (!fp) throw io_error("cannot open PNG: " + path);
  png_structp png =
      png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr,
                             detail::png_error_fn, detail::png_warn_fn);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    if (png) png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    throw io_error("libpng init failed: " + path);
  }

  // libpng reports errors by longjmp; nothing between here and read completion
  // may own resources beyond these locals.
  std::vector<unsigned char> data;
  std::vector<png_bytep> rows;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    throw io_error("malformed PNG: " + path);
  }

  png_init_io(png, fp);
  png_read_info(png, info);
  const int width = int(png_get_image_width(png, info));
  const int height = int(png_get_image_height(png, info));
  const int color = png_get_color_type(png, info);
  const int depth = png_get_bit_depth(png, info);

  if (depth == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) {
    png_set_expand_gray_1_2_4_to_8(png);
  }
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA) {
    png_set_gray_to_rgb(png);
  }
  png_set_strip_alpha(png);
  png_read_update_info(png, info);

  const std::size_t rowbytes = png_get_rowbytes(png, info);
  data.resize(rowbytes * height);
  rows.resize(height);
  for (int y = 0; y < height; ++y) rows[y] = data.data() + y * rowbytes;
  png_read_image(png, rows.data());
  png_destroy_read_struct(&png, &info, nullptr);
  std::fclose(fp);

  if (rowbytes != std::size_t(width) * 3) {
    throw io_error("PNG did not normalize to 8-bit RGB: " + path);
  }
  Tensor<Real> out(1, 3, height, width);
  for (int y = 0; y < height; ++y) {
    const unsigned char* row = data.data() + y * rowbytes;
    for (int x = 0; x < width; ++x) {
      for (int c = 0; c < 3; ++c) {
        out.at(0, c, y, x) = Real(double(row[x * 3 + c]) / 255.0);
      }
    }
  }
  return out;
}

template <typename Real>
void save_png(const Tensor<Real>& img, const std::string& path) {
  if (img.batch() != 1 || img.channels() != 3) {
    throw config_error("save_png expects a (1,3,H,W) image, got " +
                       img.shape().str());
  }
  const int H = img.height(), W = img.width();
  std::vector<unsigned char> data(std::size_t(H) * W * 3);
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) {
      for (int c = 0; c < 3; ++c) {
        const double v = std::clamp(double(img.at(0, c, y, x)), 0.0, 1.0);
        data[(std::size_t(y) * W + x) * 3 + c] =
            static_cast<unsigned char>(std::floor(v * 255.0 + 0.5));
      }
    }
  }

  FILE* fp = std::fopen(path.c_str(), "wb");
  if (!fp) throw io_error("cannot write PNG: " + path);
  png_structp png =
      png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr,
                              detail::png_error_fn, detail::png_warn_fn);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    if (png) png_destroy_write_struct(&png, &info);
    std::fclose(fp);
    throw io_error("libpng init failed: " + path);
  }
  std::vector<png_bytep> rows(H);
  for (int y = 0; y < H; ++y) rows[y] = data.data() + std::size_t(y) * W * 3;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
    throw io_error("PNG write failed: " + path);
  }
  png_init_io(png, fp);
  png_set_IHDR(png, info, W, H, 8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  if (std::fclose(fp) != 0) throw io_error("PNG close failed: " + path);
}

}  // namespace odesr
