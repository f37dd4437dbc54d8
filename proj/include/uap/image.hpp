// Copyright (c) 2026 The uap Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "uap/error.hpp"
#include "uap/tensor.hpp"

namespace uap {

// Axis-aligned pixel window inside an H x W image.
struct CropSpec {
  std::size_t x0 = 0;
  std::size_t y0 = 0;
  std::size_t w = 0;
  std::size_t h = 0;

  friend bool operator==(const CropSpec&, const CropSpec&) = default;

  bool fits(std::size_t image_h, std::size_t image_w) const {
    return w > 0 && h > 0 && x0 + w <= image_w && y0 + h <= image_h;
  }

  static CropSpec full(std::size_t image_h, std::size_t image_w) { return {0, 0, image_w, image_h}; }
};

namespace detail {

// Sample positions of one output axis. Output index i reads the crop at
//   s = start + (i + 0.5) * extent / out - 0.5
// clamped to [start, start + extent - 1]; taps lo = floor(s), hi = min(lo + 1, last),
// weight of hi = s - lo. With extent == out this is the identity.
struct ResizeAxis {
  std::vector<std::size_t> lo, hi;
  std::vector<double> frac;

  ResizeAxis(std::size_t start, std::size_t extent, std::size_t out) : lo(out), hi(out), frac(out) {
    const double scale = static_cast<double>(extent) / static_cast<double>(out);
    const double first = static_cast<double>(start);
    const double last = static_cast<double>(start + extent - 1);
    for (std::size_t i = 0; i < out; ++i) {
      double s = first + (static_cast<double>(i) + 0.5) * scale - 0.5;
      s = std::clamp(s, first, last);
      const double f = std::floor(s);
      lo[i] = static_cast<std::size_t>(f);
      hi[i] = std::min(lo[i] + 1, start + extent - 1);
      frac[i] = s - f;
    }
  }
};

}  // namespace detail

// Crop `spec` out of an H x W x C image and bilinearly resize it to out_h x out_w.
inline DenseTensor crop_resize(const DenseTensor& image, const CropSpec& spec, std::size_t out_h, std::size_t out_w) {
  require(image.rank() == 3, ErrorCode::kShapeMismatch, "expected HxWxC image, got " + shape_str(image.shape()));
  const std::size_t H = image.dim(0), W = image.dim(1), C = image.dim(2);
  require(spec.fits(H, W), ErrorCode::kShapeMismatch, "crop outside image");
  const detail::ResizeAxis ry(spec.y0, spec.h, out_h);
  const detail::ResizeAxis rx(spec.x0, spec.w, out_w);
  DenseTensor out({out_h, out_w, C});
  const double* in = image.raw();
  double* dst = out.raw();
  for (std::size_t i = 0; i < out_h; ++i) {
    const double fy = ry.frac[i];
    const double* r0 = in + ry.lo[i] * W * C;
    const double* r1 = in + ry.hi[i] * W * C;
    for (std::size_t j = 0; j < out_w; ++j) {
      const double fx = rx.frac[j];
      const std::size_t c0 = rx.lo[j] * C, c1 = rx.hi[j] * C;
      const double w00 = (1 - fy) * (1 - fx), w01 = (1 - fy) * fx, w10 = fy * (1 - fx), w11 = fy * fx;
      for (std::size_t c = 0; c < C; ++c)
        dst[c] = w00 * r0[c0 + c] + w01 * r0[c1 + c] + w10 * r1[c0 + c] + w11 * r1[c1 + c];
      dst += C;
    }
  }
  return out;
}

// Adjoint of crop_resize: pulls a gradient on the resized crop back onto the
// full image (image_h x image_w x C).
inline DenseTensor crop_resize_adjoint(const DenseTensor& grad_out, const CropSpec& spec, std::size_t image_h,
                                       std::size_t image_w) {
  require(grad_out.rank() == 3, ErrorCode::kShapeMismatch, "expected HxWxC gradient");
  require(spec.fits(image_h, image_w), ErrorCode::kShapeMismatch, "crop outside image");
  const std::size_t out_h = grad_out.dim(0), out_w = grad_out.dim(1), C = grad_out.dim(2);
  const detail::ResizeAxis ry(spec.y0, spec.h, out_h);
  const detail::ResizeAxis rx(spec.x0, spec.w, out_w);
  DenseTensor grad({image_h, image_w, C});
  double* g = grad.raw();
  const double* src = grad_out.raw();
  for (std::size_t i = 0; i < out_h; ++i) {
    const double fy = ry.frac[i];
    double* r0 = g + ry.lo[i] * image_w * C;
    double* r1 = g + ry.hi[i] * image_w * C;
    for (std::size_t j = 0; j < out_w; ++j) {
      const double fx = rx.frac[j];
      const std::size_t c0 = rx.lo[j] * C, c1 = rx.hi[j] * C;
      const double w00 = (1 - fy) * (1 - fx), w01 = (1 - fy) * fx, w10 = fy * (1 - fx), w11 = fy * fx;
      for (std::size_t c = 0; c < C; ++c) {
        const double v = src[c];
        r0[c0 + c] += w00 * v;
        r0[c1 + c] += w01 * v;
        r1[c0 + c] += w10 * v;
        r1[c1 + c] += w11 * v;
      }
      src += C;
    }
  }
  return grad;
}

inline DenseTensor clip_pixels(DenseTensor image) {
  for (double& v : image.data()) v = std::clamp(v, 0.0, 1.0);
  return image;
}

// Reads an 8-bit binary PPM (P6) into an H x W x 3 tensor scaled to [0, 1].
inline DenseTensor read_ppm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.is_open(), ErrorCode::kIoError, "cannot open " + path.string());
  auto next_token = [&]() {
    std::string tok;
    int ch;
    while ((ch = in.get()) != EOF) {
      if (ch == '#') {
        while ((ch = in.get()) != EOF && ch != '\n') {
        }
        continue;
      }
      if (std::isspace(ch)) {
        if (!tok.empty()) break;
        continue;
      }
      tok.push_back(static_cast<char>(ch));
    }
    return tok;
  };
  require(next_token() == "P6", ErrorCode::kBadMagic, path.string() + " is not a binary PPM (P6)");
  std::size_t w = 0, h = 0, maxval = 0;
  try {
    w = std::stoul(next_token());
    h = std::stoul(next_token());
    maxval = std::stoul(next_token());
  } catch (const std::exception&) {
    fail(ErrorCode::kTruncatedFile, "malformed PPM header in " + path.string());
  }
  require(w > 0 && h > 0, ErrorCode::kShapeMismatch, "empty PPM");
  require(maxval == 255, ErrorCode::kInvalidArgument, "only 8-bit PPM (maxval 255) is supported");
  std::vector<unsigned char> bytes(w * h * 3);
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  require(static_cast<std::size_t>(in.gcount()) == bytes.size(), ErrorCode::kTruncatedFile,
          "PPM pixel data truncated in " + path.string());
  DenseTensor img({h, w, 3});
  for (std::size_t i = 0; i < bytes.size(); ++i) img[i] = bytes[i] / 255.0;
  return img;
}

inline void write_ppm(const DenseTensor& image, const std::filesystem::path& path) {
  require(image.rank() == 3 && image.dim(2) == 3, ErrorCode::kShapeMismatch, "PPM export needs HxWx3");
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(out.is_open(), ErrorCode::kIoError, "cannot open " + path.string());
  out << "P6\n" << image.dim(1) << " " << image.dim(0) << "\n255\n";
  for (double v : image.data()) out.put(static_cast<char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)));
}

}  // namespace uap
