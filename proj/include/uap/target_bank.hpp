// Copyright (c) 2026 The uap Authors
// SPDX-License-Identifier: Apache-2.0
//
// Per-target cache of token cluster centers and global features, one entry per
// (train encoder, target crop). Bank files are
//   "UBK1" | 32-byte settings digest | NTF blocks
// with the NTF blocks being: meta [encoders, crops, k, d], crop specs
// (crops x 4: x0, y0, w, h), then centers and global feature per
// (encoder, crop) in encoder-major order.

#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "uap/encoder.hpp"
#include "uap/error.hpp"
#include "uap/hash.hpp"
#include "uap/kmeans.hpp"
#include "uap/ntf.hpp"
#include "uap/parallel.hpp"
#include "uap/rng.hpp"
#include "uap/sampler.hpp"

namespace uap {

inline constexpr std::array<char, 4> kBankMagic = {'U', 'B', 'K', '1'};

// Everything a bank's contents depend on besides the target pixels.
struct BankSettings {
  std::size_t crops = 4;  // m random crops
  bool attention_crop = true;
  std::size_t clusters = 4;
  CropSettings crop;
  EncoderDims dims;
  std::string encoder_kind = "toy";
  std::vector<std::uint64_t> encoder_seeds;
  std::uint64_t seed = 0;

  Digest digest() const {
    std::ostringstream s;
    s.precision(17);
    s << "bank-v1;m=" << crops << ";agc=" << attention_crop << ";k=" << clusters << ";smin=" << crop.scale_min
      << ";out=" << crop.out_size << ";minside=" << crop.min_side << ";img=" << dims.image_size
      << ";ch=" << dims.channels << ";patch=" << dims.patch << ";d=" << dims.embed_dim << ";enc=" << encoder_kind
      << ";seeds=";
    for (auto v : encoder_seeds) s << v << ",";
    s << ";seed=" << seed;
    return sha256(s.str());
  }
};

class TargetBank {
 public:
  TargetBank() = default;
  TargetBank(std::vector<CropSpec> crops, std::size_t encoders, std::size_t k, std::vector<DenseTensor> centers,
             std::vector<DenseTensor> globals, Digest digest)
      : crops_(std::move(crops)),
        encoders_(encoders),
        k_(k),
        centers_(std::move(centers)),
        globals_(std::move(globals)),
        digest_(digest) {
    require(centers_.size() == encoders_ * crops_.size() && globals_.size() == centers_.size(),
            ErrorCode::kShapeMismatch, "bank entry count mismatch");
    for (const auto& c : centers_) {
      require(c.rank() == 2 && c.dim(0) == k_, ErrorCode::kShapeMismatch, "center block is not K x d");
      ensure_finite(c, "bank centers");
    }
  }

  std::size_t num_encoders() const { return encoders_; }
  std::size_t num_crops() const { return crops_.size(); }
  std::size_t k() const { return k_; }
  const std::vector<CropSpec>& crop_specs() const { return crops_; }
  const DenseTensor& centers(std::size_t enc, std::size_t crop) const { return centers_.at(enc * crops_.size() + crop); }
  const DenseTensor& global_feat(std::size_t enc, std::size_t crop) const {
    return globals_.at(enc * crops_.size() + crop);
  }
  const Digest& digest() const { return digest_; }

  void save(std::ostream& out) const {
    out.write(kBankMagic.data(), 4);
    out.write(reinterpret_cast<const char*>(digest_.data()), 32);
    const std::size_t d = centers_.empty() ? 1 : centers_.front().dim(1);
    write_ntf(DenseTensor::vector({static_cast<double>(encoders_), static_cast<double>(crops_.size()),
                                   static_cast<double>(k_), static_cast<double>(d)}),
              out);
    DenseTensor specs({crops_.size(), 4});
    for (std::size_t i = 0; i < crops_.size(); ++i) {
      specs.at(i, 0) = static_cast<double>(crops_[i].x0);
      specs.at(i, 1) = static_cast<double>(crops_[i].y0);
      specs.at(i, 2) = static_cast<double>(crops_[i].w);
      specs.at(i, 3) = static_cast<double>(crops_[i].h);
    }
    write_ntf(specs, out);
    for (std::size_t i = 0; i < centers_.size(); ++i) {
      write_ntf(centers_[i], out);
      write_ntf(globals_[i], out);
    }
    require(out.good(), ErrorCode::kIoError, "bank write failed");
  }

  void save(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    require(out.is_open(), ErrorCode::kIoError, "cannot open " + path.string());
    save(out);
  }

  // `expected` (when given) must match the digest stored in the file.
  static TargetBank load(std::istream& in, const Digest* expected = nullptr) {
    std::array<char, 4> magic{};
    detail::read_exact(in, magic.data(), 4, "bank magic");
    require(magic == kBankMagic, ErrorCode::kBadMagic, "not a UBK1 bank");
    Digest digest{};
    detail::read_exact(in, digest.data(), 32, "bank digest");
    if (expected != nullptr)
      require(*expected == digest, ErrorCode::kVersionMismatch,
              "bank was built with different settings (" + to_hex(digest).substr(0, 12) + " vs " +
                  to_hex(*expected).substr(0, 12) + ")");
    const DenseTensor meta = read_ntf(in);
    require(meta.size() == 4, ErrorCode::kShapeMismatch, "bad bank meta block");
    const auto encoders = static_cast<std::size_t>(meta[0]);
    const auto ncrops = static_cast<std::size_t>(meta[1]);
    const auto k = static_cast<std::size_t>(meta[2]);
    const DenseTensor specs = read_ntf(in);
    require(specs.shape() == Shape{ncrops, 4}, ErrorCode::kShapeMismatch, "bad crop spec block");
    std::vector<CropSpec> crops(ncrops);
    for (std::size_t i = 0; i < ncrops; ++i)
      crops[i] = {static_cast<std::size_t>(specs.at(i, 0)), static_cast<std::size_t>(specs.at(i, 1)),
                  static_cast<std::size_t>(specs.at(i, 2)), static_cast<std::size_t>(specs.at(i, 3))};
    std::vector<DenseTensor> centers, globals;
    for (std::size_t i = 0; i < encoders * ncrops; ++i) {
      centers.push_back(read_ntf(in));
      globals.push_back(read_ntf(in));
    }
    return TargetBank(std::move(crops), encoders, k, std::move(centers), std::move(globals), digest);
  }

  static TargetBank load(const std::filesystem::path& path, const Digest* expected = nullptr) {
    std::ifstream in(path, std::ios::binary);
    require(in.is_open(), ErrorCode::kIoError, "cannot open " + path.string());
    return load(in, expected);
  }

  std::string bytes() const {
    std::ostringstream out(std::ios::binary);
    save(out);
    return std::move(out).str();
  }

 private:
  std::vector<CropSpec> crops_;
  std::size_t encoders_ = 0;
  std::size_t k_ = 0;
  std::vector<DenseTensor> centers_;
  std::vector<DenseTensor> globals_;
  Digest digest_{};
};

// Cluster centers and global feature of one crop under one encoder.
struct CropFeatures {
  DenseTensor centers;
  DenseTensor global_feat;
};

inline CropFeatures crop_features(const Encoder& enc, const DenseTensor& crop_image, std::size_t k, SeededRng rng) {
  EncoderOutput out = enc.forward(crop_image);
  return {kmeans(out.tokens, k, rng).centers, std::move(out.global_feat)};
}

// One crop set per target (attention crop from the first encoder), then
// per-(encoder, crop) features.
inline TargetBank build_bank(const DenseTensor& target, const std::vector<EncoderPtr>& ensemble,
                             const BankSettings& settings, const SeededRng& rng) {
  require(!ensemble.empty(), ErrorCode::kInvalidArgument, "bank needs at least one encoder");
  require(settings.clusters >= 1, ErrorCode::kInvalidArgument, "k must be >= 1");
  SeededRng crop_rng = rng.derive({0xC80F});
  const auto crops =
      build_crop_set(target, settings.crops, *ensemble.front(), crop_rng, settings.crop, settings.attention_crop);
  require(!crops.empty(), ErrorCode::kInvalidArgument, "empty crop set (m=0 without the attention crop)");
  std::vector<CropSpec> specs;
  for (const auto& c : crops) specs.push_back(c.spec);
  const std::size_t pairs = ensemble.size() * crops.size();
  std::vector<DenseTensor> centers(pairs), globals(pairs);
  parallel_for(pairs, [&](std::size_t i) {
    const std::size_t e = i / crops.size(), c = i % crops.size();
    auto f = crop_features(*ensemble[e], crops[c].image, settings.clusters, rng.derive({0xC1u, e, c}));
    centers[i] = std::move(f.centers);
    globals[i] = std::move(f.global_feat);
  });
  return TargetBank(std::move(specs), ensemble.size(), settings.clusters, std::move(centers), std::move(globals),
                    settings.digest());
}

}  // namespace uap
