// Copyright (c) 2026 The uap Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <set>
#include <string>
#include <vector>

#include "uap/error.hpp"
#include "uap/tensor.hpp"

namespace uap {

struct EncoderDims {
  std::size_t image_size = 32;  // canonical square input side
  std::size_t channels = 3;
  std::size_t patch = 8;
  std::size_t embed_dim = 16;

  std::size_t grid() const { return image_size / patch; }
  std::size_t tokens() const { return grid() * grid(); }
  Shape image_shape() const { return {image_size, image_size, channels}; }

  friend bool operator==(const EncoderDims&, const EncoderDims&) = default;
};

struct EncoderOutput {
  DenseTensor tokens;         // L x d
  DenseTensor global_feat;    // d
  DenseTensor attention_map;  // grid_h x grid_w, non-negative, sums to 1
};

// Result of a forward pass that can be pulled back to the input pixels.
class ForwardRecord {
 public:
  virtual ~ForwardRecord() = default;
  virtual const EncoderOutput& output() const = 0;
  // Gradient of <tokens, grad_tokens> + <global_feat, grad_global> w.r.t. the input image.
  virtual DenseTensor backward(const DenseTensor& grad_tokens, const DenseTensor& grad_global) const = 0;
};

// Surrogate feature extractor. Implementations are immutable once built and
// safe to call from many threads.
class Encoder {
 public:
  virtual ~Encoder() = default;

  virtual std::string kind() const = 0;
  virtual std::uint64_t seed() const = 0;
  virtual const EncoderDims& dims() const = 0;

  virtual EncoderOutput forward(const DenseTensor& image) const = 0;
  virtual DenseTensor backward_to_input(const DenseTensor& image, const DenseTensor& grad_tokens,
                                        const DenseTensor& grad_global) const = 0;

  // Default recomputes the forward pass inside backward; implementations that
  // can keep activations around should override.
  virtual std::unique_ptr<ForwardRecord> record(const DenseTensor& image) const {
    struct Recompute final : ForwardRecord {
      const Encoder* enc;
      DenseTensor image;
      EncoderOutput out;
      const EncoderOutput& output() const override { return out; }
      DenseTensor backward(const DenseTensor& gt, const DenseTensor& gg) const override {
        return enc->backward_to_input(image, gt, gg);
      }
    };
    auto r = std::make_unique<Recompute>();
    r->enc = this;
    r->image = image;
    r->out = forward(image);
    return r;
  }
};

using EncoderPtr = std::shared_ptr<const Encoder>;
using EncoderFactory = std::function<EncoderPtr(std::uint64_t seed, const EncoderDims& dims)>;

// Name -> factory table. The toy encoder registers itself as "toy".
class EncoderRegistry {
 public:
  static EncoderRegistry& instance() {
    static EncoderRegistry registry;
    return registry;
  }

  void add(const std::string& name, EncoderFactory factory) {
    std::lock_guard lock(mu_);
    factories_[name] = std::move(factory);
  }

  bool contains(const std::string& name) const {
    std::lock_guard lock(mu_);
    return factories_.count(name) != 0;
  }

  EncoderPtr create(const std::string& name, std::uint64_t seed, const EncoderDims& dims) const {
    EncoderFactory f;
    {
      std::lock_guard lock(mu_);
      auto it = factories_.find(name);
      require(it != factories_.end(), ErrorCode::kUnknownEncoder, "no encoder registered as '" + name + "'");
      f = it->second;
    }
    return f(seed, dims);
  }

 private:
  mutable std::mutex mu_;
  std::map<std::string, EncoderFactory> factories_;
};

inline std::vector<EncoderPtr> make_ensemble(const std::vector<std::uint64_t>& seeds, const EncoderDims& dims,
                                             const std::string& kind = "toy") {
  require(!seeds.empty(), ErrorCode::kInvalidArgument, "ensemble needs at least one seed");
  std::set<std::uint64_t> seen;
  for (auto s : seeds)
    require(seen.insert(s).second, ErrorCode::kDuplicateSeed, "encoder seed " + std::to_string(s) + " repeated");
  std::vector<EncoderPtr> out;
  out.reserve(seeds.size());
  for (auto s : seeds) out.push_back(EncoderRegistry::instance().create(kind, s, dims));
  return out;
}

}  // namespace uap
