// Copyright (c) 2026 The uap Authors
// SPDX-License-Identifier: Apache-2.0
//
// Single-layer, single-head attention encoder with a hand-written backward
// pass. Patches are flattened in (row, col, channel) order; there is no
// positional embedding.
//
//   E = patches * W_patch          (L x d)
//   A = softmax(E W_q (E W_k)^T / sqrt(d))
//   Z = (E + A E W_v) W_out        tokens
//   global = mean_l Z_l
//   attention_map = column mean of A on the patch grid

#pragma once

#include <cmath>
#include <memory>

#include "uap/encoder.hpp"
#include "uap/rng.hpp"
#include "uap/tensor.hpp"

namespace uap {

struct ToyEncoderParams {
  DenseTensor patch_embed;  // (patch^2 C) x d
  DenseTensor w_q, w_k, w_v, w_out;  // d x d

  static ToyEncoderParams from_seed(std::uint64_t seed, const EncoderDims& dims) {
    SeededRng rng(seed, stream_key({0x746F79ULL}));  // "toy"
    const std::size_t d = dims.embed_dim;
    const double bound = 1.0 / std::sqrt(static_cast<double>(d));
    auto draw = [&](std::size_t rows, std::size_t cols) {
      DenseTensor m({rows, cols});
      for (double& v : m.data()) v = rng.uniform(-bound, bound);
      return m;
    };
    ToyEncoderParams p;
    p.patch_embed = draw(dims.patch * dims.patch * dims.channels, d);
    p.w_q = draw(d, d);
    p.w_k = draw(d, d);
    p.w_v = draw(d, d);
    p.w_out = draw(d, d);
    return p;
  }
};

class ToyEncoder final : public Encoder {
 public:
  ToyEncoder(std::uint64_t seed, const EncoderDims& dims)
      : seed_(seed), dims_(dims), params_(ToyEncoderParams::from_seed(seed, dims)) {
    require(dims.patch > 0 && dims.embed_dim > 0 && dims.channels > 0, ErrorCode::kInvalidArgument,
            "toy encoder dims must be positive");
  }

  std::string kind() const override { return "toy"; }
  std::uint64_t seed() const override { return seed_; }
  const EncoderDims& dims() const override { return dims_; }
  const ToyEncoderParams& params() const { return params_; }

  EncoderOutput forward(const DenseTensor& image) const override { return run(image).out; }

  DenseTensor backward_to_input(const DenseTensor& image, const DenseTensor& grad_tokens,
                                const DenseTensor& grad_global) const override {
    return pull_back(run(image), grad_tokens, grad_global);
  }

  std::unique_ptr<ForwardRecord> record(const DenseTensor& image) const override {
    struct Cached final : ForwardRecord {
      const ToyEncoder* enc;
      Activations act;
      const EncoderOutput& output() const override { return act.out; }
      DenseTensor backward(const DenseTensor& gt, const DenseTensor& gg) const override {
        return enc->pull_back(act, gt, gg);
      }
    };
    auto r = std::make_unique<Cached>();
    r->enc = this;
    r->act = run(image);
    return r;
  }

 private:
  struct Activations {
    Shape image_shape;
    std::size_t grid_h = 0, grid_w = 0;
    DenseTensor patches;  // L x (P^2 C)
    DenseTensor embed;    // E
    DenseTensor q, k, v;
    DenseTensor attn;     // A
    EncoderOutput out;
  };

  void check_image(const DenseTensor& image) const {
    require(image.rank() == 3 && image.dim(2) == dims_.channels && image.dim(0) % dims_.patch == 0 &&
                image.dim(1) % dims_.patch == 0,
            ErrorCode::kShapeMismatch,
            "toy encoder expects HxWx" + std::to_string(dims_.channels) + " with sides divisible by " +
                std::to_string(dims_.patch) + ", got " + shape_str(image.shape()));
  }

  Activations run(const DenseTensor& image) const {
    check_image(image);
    const std::size_t P = dims_.patch, C = dims_.channels, d = dims_.embed_dim;
    const std::size_t W = image.dim(1);
    Activations a;
    a.image_shape = image.shape();
    a.grid_h = image.dim(0) / P;
    a.grid_w = W / P;
    const std::size_t L = a.grid_h * a.grid_w;
    const std::size_t pdim = P * P * C;

    a.patches = DenseTensor({L, pdim});
    for (std::size_t gy = 0; gy < a.grid_h; ++gy)
      for (std::size_t gx = 0; gx < a.grid_w; ++gx) {
        double* dst = a.patches.raw() + (gy * a.grid_w + gx) * pdim;
        for (std::size_t py = 0; py < P; ++py) {
          const double* src = image.raw() + ((gy * P + py) * W + gx * P) * C;
          std::copy(src, src + P * C, dst + py * P * C);
        }
      }

    a.embed = matmul(a.patches, params_.patch_embed);
    a.q = matmul(a.embed, params_.w_q);
    a.k = matmul(a.embed, params_.w_k);
    a.v = matmul(a.embed, params_.w_v);

    const double scale = 1.0 / std::sqrt(static_cast<double>(d));
    a.attn = matmul_nt(a.q, a.k);
    for (std::size_t i = 0; i < L; ++i) {
      auto r = a.attn.row(i);
      double mx = r[0] * scale;
      for (double s : r) mx = std::max(mx, s * scale);
      double z = 0.0;
      for (double& s : r) {
        s = std::exp(s * scale - mx);
        z += s;
      }
      for (double& s : r) s /= z;
    }

    DenseTensor hidden = matmul(a.attn, a.v);
    hidden += a.embed;
    a.out.tokens = matmul(hidden, params_.w_out);

    a.out.global_feat = DenseTensor({d});
    for (std::size_t l = 0; l < L; ++l)
      for (std::size_t j = 0; j < d; ++j) a.out.global_feat[j] += a.out.tokens.at(l, j);
    a.out.global_feat *= 1.0 / static_cast<double>(L);

    a.out.attention_map = DenseTensor({a.grid_h, a.grid_w});
    for (std::size_t i = 0; i < L; ++i)
      for (std::size_t j = 0; j < L; ++j) a.out.attention_map[j] += a.attn.at(i, j);
    a.out.attention_map *= 1.0 / static_cast<double>(L);
    return a;
  }

  DenseTensor pull_back(const Activations& a, const DenseTensor& grad_tokens, const DenseTensor& grad_global) const {
    const std::size_t P = dims_.patch, C = dims_.channels, d = dims_.embed_dim;
    const std::size_t L = a.grid_h * a.grid_w;
    require(grad_tokens.shape() == Shape{L, d} && grad_global.shape() == Shape{d}, ErrorCode::kShapeMismatch,
            "cotangent shapes " + shape_str(grad_tokens.shape()) + ", " + shape_str(grad_global.shape()));

    // Global feature is the token mean, so its cotangent spreads evenly.
    DenseTensor dz = grad_tokens;
    const double inv_l = 1.0 / static_cast<double>(L);
    for (std::size_t l = 0; l < L; ++l)
      for (std::size_t j = 0; j < d; ++j) dz.at(l, j) += grad_global[j] * inv_l;

    DenseTensor dh = matmul_nt(dz, params_.w_out);  // dY
    DenseTensor d_embed = dh;                       // residual branch
    DenseTensor d_attn = matmul_nt(dh, a.v);        // dA
    DenseTensor dv = matmul_tn(a.attn, dh);

    // Softmax backward, then the 1/sqrt(d) scaling.
    const double scale = 1.0 / std::sqrt(static_cast<double>(d));
    DenseTensor ds({L, L});
    for (std::size_t i = 0; i < L; ++i) {
      const auto ai = a.attn.row(i);
      const auto gi = d_attn.row(i);
      const double inner = dot(ai, gi);
      for (std::size_t j = 0; j < L; ++j) ds.at(i, j) = ai[j] * (gi[j] - inner) * scale;
    }
    DenseTensor dq = matmul(ds, a.k);
    DenseTensor dk = matmul_tn(ds, a.q);

    d_embed += matmul_nt(dq, params_.w_q);
    d_embed += matmul_nt(dk, params_.w_k);
    d_embed += matmul_nt(dv, params_.w_v);

    DenseTensor d_patches = matmul_nt(d_embed, params_.patch_embed);

    DenseTensor grad(a.image_shape);
    const std::size_t W = a.image_shape[1];
    const std::size_t pdim = P * P * C;
    for (std::size_t gy = 0; gy < a.grid_h; ++gy)
      for (std::size_t gx = 0; gx < a.grid_w; ++gx) {
        const double* src = d_patches.raw() + (gy * a.grid_w + gx) * pdim;
        for (std::size_t py = 0; py < P; ++py) {
          double* dst = grad.raw() + ((gy * P + py) * W + gx * P) * C;
          std::copy(src + py * P * C, src + (py + 1) * P * C, dst);
        }
      }
    return grad;
  }

  std::uint64_t seed_;
  EncoderDims dims_;
  ToyEncoderParams params_;
};

namespace detail {
inline const bool kToyRegistered = [] {
  EncoderRegistry::instance().add("toy", [](std::uint64_t seed, const EncoderDims& dims) -> EncoderPtr {
    return std::make_shared<ToyEncoder>(seed, dims);
  });
  return true;
}();
}  // namespace detail

}  // namespace uap
