// Copyright (c) 2026 The uap Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "uap/encoder.hpp"
#include "uap/error.hpp"
#include "uap/image.hpp"
#include "uap/ntf.hpp"
#include "uap/rng.hpp"
#include "uap/tensor.hpp"

namespace uap {

enum class PoolRole { kSource, kTarget, kUnseen };

// Images sharing one H x W x C shape. `ids` are globally unique across pools
// so seen/unseen splits can be checked for overlap.
struct ImagePool {
  PoolRole role = PoolRole::kSource;
  std::vector<DenseTensor> images;
  std::vector<std::uint64_t> ids;

  std::size_t size() const { return images.size(); }

  void add(DenseTensor image, std::uint64_t id) {
    require(image.rank() == 3, ErrorCode::kShapeMismatch, "pool images must be HxWxC");
    if (!images.empty())
      require(image.shape() == images.front().shape(), ErrorCode::kShapeMismatch,
              "pool image " + shape_str(image.shape()) + " differs from " + shape_str(images.front().shape()));
    images.push_back(std::move(image));
    ids.push_back(id);
  }

  static ImagePool load_dir(const std::filesystem::path& dir, PoolRole role, std::uint64_t id_base) {
    require(std::filesystem::is_directory(dir), ErrorCode::kMissingPool, "no pool directory " + dir.string());
    std::vector<std::filesystem::path> files;
    for (const auto& entry : std::filesystem::directory_iterator(dir))
      if (entry.is_regular_file() && entry.path().extension() == ".ntf") files.push_back(entry.path());
    std::sort(files.begin(), files.end());
    require(!files.empty(), ErrorCode::kMissingPool, "pool directory " + dir.string() + " holds no .ntf images");
    ImagePool pool;
    pool.role = role;
    for (std::size_t i = 0; i < files.size(); ++i) pool.add(read_ntf(files[i]), id_base + i);
    return pool;
  }
};

struct Crop {
  CropSpec spec;
  DenseTensor image;  // resized to the canonical encoder input
};

struct CropSettings {
  double scale_min = 0.5;
  std::size_t out_size = 32;  // canonical encoder side
  std::size_t min_side = 8;   // encoder patch size
};

// Uniform sample of n distinct pool indices (uniform over size-n subsets).
inline std::vector<std::size_t> sample_source_indices(std::size_t pool_size, std::size_t n, SeededRng& rng) {
  return rng.sample_without_replacement(pool_size, n);
}

inline std::vector<DenseTensor> sample_sources(const ImagePool& pool, std::size_t n, SeededRng& rng) {
  std::vector<DenseTensor> out;
  for (std::size_t i : sample_source_indices(pool.size(), n, rng)) out.push_back(pool.images[i]);
  return out;
}

// Crop geometry for a given scale and two uniform draws in [0, 1) for the offsets.
inline CropSpec crop_geometry(std::size_t image_h, std::size_t image_w, double scale, double ux, double uy,
                              std::size_t min_side) {
  auto side = [&](std::size_t full) {
    const auto s = static_cast<std::size_t>(std::lround(scale * static_cast<double>(full)));
    return std::clamp(s, std::min(min_side, full), full);
  };
  CropSpec c;
  c.w = side(image_w);
  c.h = side(image_h);
  c.x0 = static_cast<std::size_t>(ux * static_cast<double>(image_w - c.w + 1));
  c.y0 = static_cast<std::size_t>(uy * static_cast<double>(image_h - c.h + 1));
  return c;
}

inline CropSpec random_crop_spec(std::size_t image_h, std::size_t image_w, SeededRng& rng, const CropSettings& cs) {
  require(image_h >= cs.min_side && image_w >= cs.min_side, ErrorCode::kImageTooSmall,
          "image smaller than one patch");
  const double scale = rng.uniform(cs.scale_min, 1.0);
  CropSpec c = crop_geometry(image_h, image_w, scale, 0.0, 0.0, cs.min_side);
  c.x0 = static_cast<std::size_t>(rng.range(0, static_cast<std::int64_t>(image_w - c.w)));
  c.y0 = static_cast<std::size_t>(rng.range(0, static_cast<std::int64_t>(image_h - c.h)));
  return c;
}

inline Crop random_crop(const DenseTensor& image, SeededRng& rng, const CropSettings& cs) {
  require(image.rank() == 3, ErrorCode::kShapeMismatch, "expected HxWxC image");
  const CropSpec spec = random_crop_spec(image.dim(0), image.dim(1), rng, cs);
  return {spec, crop_resize(image, spec, cs.out_size, cs.out_size)};
}

// Square window centred on the most attended patch, wide enough to reach
// every patch whose attention is at least half the peak. Ties on the peak go
// to the lowest row-major cell.
inline CropSpec attention_crop_spec(const DenseTensor& attention_map, std::size_t image_h, std::size_t image_w,
                                    std::size_t min_side) {
  require(attention_map.rank() == 2, ErrorCode::kShapeMismatch, "attention map must be 2-D");
  const std::size_t gh = attention_map.dim(0), gw = attention_map.dim(1);
  std::size_t best = 0;
  for (std::size_t i = 1; i < attention_map.size(); ++i)
    if (attention_map[i] > attention_map[best]) best = i;
  const double peak = attention_map[best];
  const double cell_h = static_cast<double>(image_h) / static_cast<double>(gh);
  const double cell_w = static_cast<double>(image_w) / static_cast<double>(gw);
  const double cy = (static_cast<double>(best / gw) + 0.5) * cell_h;
  const double cx = (static_cast<double>(best % gw) + 0.5) * cell_w;

  double half = 0.0;
  for (std::size_t i = 0; i < attention_map.size(); ++i) {
    if (attention_map[i] < 0.5 * peak) continue;
    const double y0 = static_cast<double>(i / gw) * cell_h, x0 = static_cast<double>(i % gw) * cell_w;
    half = std::max({half, std::abs(y0 - cy), std::abs(y0 + cell_h - cy), std::abs(x0 - cx),
                     std::abs(x0 + cell_w - cx)});
  }

  auto span = [&](double centre, std::size_t full) {
    auto lo = static_cast<std::int64_t>(std::floor(centre - half));
    auto hi = static_cast<std::int64_t>(std::ceil(centre + half));
    lo = std::max<std::int64_t>(lo, 0);
    hi = std::min<std::int64_t>(hi, static_cast<std::int64_t>(full));
    // Widen to the minimum side, staying inside the image.
    const auto need = static_cast<std::int64_t>(std::min(min_side, full));
    while (hi - lo < need) {
      if (lo > 0) --lo;
      if (hi - lo < need && hi < static_cast<std::int64_t>(full)) ++hi;
    }
    return std::pair<std::size_t, std::size_t>(static_cast<std::size_t>(lo), static_cast<std::size_t>(hi - lo));
  };
  const auto [y0, h] = span(cy, image_h);
  const auto [x0, w] = span(cx, image_w);
  return {x0, y0, w, h};
}

inline Crop attention_guided_crop(const DenseTensor& image, const Encoder& enc, const CropSettings& cs) {
  const EncoderOutput out = enc.forward(image);
  const CropSpec spec = attention_crop_spec(out.attention_map, image.dim(0), image.dim(1), cs.min_side);
  return {spec, crop_resize(image, spec, cs.out_size, cs.out_size)};
}

// m random crops followed by the attention-guided crop (when requested).
inline std::vector<Crop> build_crop_set(const DenseTensor& target, std::size_t m, const Encoder& enc, SeededRng& rng,
                                        const CropSettings& cs, bool with_attention = true) {
  std::vector<Crop> crops;
  crops.reserve(m + 1);
  for (std::size_t i = 0; i < m; ++i) crops.push_back(random_crop(target, rng, cs));
  if (with_attention) crops.push_back(attention_guided_crop(target, enc, cs));
  return crops;
}

}  // namespace uap
