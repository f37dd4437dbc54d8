// Copyright (c) 2026 The uap Authors
// SPDX-License-Identifier: Apache-2.0
//
// Procedural image pools: a two-color gradient background with a few
// rectangles, discs and stripe bands on top. Stand-in data with no dataset
// dependency.

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <string>

#include "uap/ntf.hpp"
#include "uap/rng.hpp"
#include "uap/sampler.hpp"
#include "uap/tensor.hpp"

namespace uap {

struct SyntheticSpec {
  std::size_t side = 32;
  std::size_t channels = 3;
  std::size_t min_shapes = 2;
  std::size_t max_shapes = 5;
};

inline DenseTensor synthetic_image(SeededRng& rng, const SyntheticSpec& spec = {}) {
  require(spec.side >= 4 && spec.channels >= 1 && spec.min_shapes <= spec.max_shapes, ErrorCode::kInvalidArgument,
          "bad synthetic image spec");
  const std::size_t n = spec.side, C = spec.channels;
  const double side = static_cast<double>(n);
  DenseTensor img({n, n, C});
  auto color = [&] {
    std::vector<double> c(C);
    for (double& v : c) v = rng.uniform();
    return c;
  };

  const auto c0 = color(), c1 = color();
  const double angle = rng.uniform(0.0, 2.0 * M_PI);
  const double ux = std::cos(angle), uy = std::sin(angle);
  for (std::size_t y = 0; y < n; ++y)
    for (std::size_t x = 0; x < n; ++x) {
      const double t = 0.5 + 0.5 * ((x / side - 0.5) * ux + (y / side - 0.5) * uy) * 1.41421356;
      for (std::size_t c = 0; c < C; ++c) img.at(y, x, c) = (1.0 - t) * c0[c] + t * c1[c];
    }

  const std::size_t shapes = static_cast<std::size_t>(rng.range(static_cast<std::int64_t>(spec.min_shapes),
                                                                 static_cast<std::int64_t>(spec.max_shapes)));
  for (std::size_t s = 0; s < shapes; ++s) {
    const auto col = color();
    const auto kind = rng.below(3);
    const double cx = rng.uniform(0.0, side), cy = rng.uniform(0.0, side);
    const double r = rng.uniform(0.1, 0.35) * side;
    const double hw = rng.uniform(0.1, 0.4) * side, hh = rng.uniform(0.1, 0.4) * side;
    const double period = rng.uniform(3.0, 8.0);
    const double phase = rng.uniform(0.0, period);
    for (std::size_t y = 0; y < n; ++y)
      for (std::size_t x = 0; x < n; ++x) {
        const double px = x + 0.5, py = y + 0.5;
        bool inside = false;
        if (kind == 0) {
          inside = std::abs(px - cx) <= hw && std::abs(py - cy) <= hh;
        } else if (kind == 1) {
          inside = (px - cx) * (px - cx) + (py - cy) * (py - cy) <= r * r;
        } else {
          // Horizontal stripes inside a band.
          inside = std::abs(py - cy) <= hh && std::fmod(px + phase, period) < 0.5 * period;
        }
        if (inside)
          for (std::size_t c = 0; c < C; ++c) img.at(y, x, c) = col[c];
      }
  }
  return img;
}

inline ImagePool synthetic_pool(std::size_t count, PoolRole role, std::uint64_t id_base, SeededRng rng,
                                const SyntheticSpec& spec = {}) {
  ImagePool pool;
  pool.role = role;
  for (std::size_t i = 0; i < count; ++i) {
    SeededRng r = rng.derive({i});
    pool.add(synthetic_image(r, spec), id_base + i);
  }
  return pool;
}

// Writes img_0000.ntf, img_0001.ntf, ... (sorted order equals index order).
inline void save_pool(const ImagePool& pool, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  for (std::size_t i = 0; i < pool.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "img_%04zu.ntf", i);
    write_ntf(pool.images[i], dir / name);
  }
}

}  // namespace uap
