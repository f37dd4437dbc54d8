// Copyright (c) 2026 The uap Authors
// SPDX-License-Identifier: Apache-2.0
//
// Alignment objective (maximized). Per train encoder i and target crop c:
//   sim_kl   = cos(center_k, adv_l)
//   plan     = entropic OT plan of sim
//   r_l      = max_k sim_kl,   w_l = logistic((r_l - gamma) / sharpness)
//   L_TR     = sum_kl w_l sim_kl plan_kl + lambda_pre sum_l (1 - w_l) cos(adv_l, src_l)
//   L_coa    = cos(adv_global, target_global)
// Encoder loss is the crop mean of L_TR + lambda_coa L_coa, and the total is
// sum_i W_i * loss_i. Gates and ensemble weights are constants for the
// gradient; the plan is either constant (default) or differentiated through.

#pragma once

#include <algorithm>
#include <cmath>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "uap/encoder.hpp"
#include "uap/error.hpp"
#include "uap/image.hpp"
#include "uap/sinkhorn.hpp"
#include "uap/target_bank.hpp"
#include "uap/tensor.hpp"

namespace uap {

struct RoutingParams {
  double gamma = 0.0;       // gate threshold (route margin)
  double sharpness = 0.2;   // gate temperature
  double lambda_pre = 0.05;
  double lambda_coa = 1.0;

  void validate() const {
    require(sharpness > 0.0, ErrorCode::kConfigInvalid, "gate sharpness must be positive");
    require(lambda_pre >= 0.0 && lambda_coa >= 0.0, ErrorCode::kConfigInvalid, "loss weights must be >= 0");
  }
};

enum class OtGradient { kStop, kUnrolled };

struct AlignmentParams {
  RoutingParams routing;
  SinkhornOptions sinkhorn;
  OtGradient ot_gradient = OtGradient::kStop;
};

inline double logistic(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

// K x L matrix of cos(center_k, token_l).
inline DenseTensor similarity(const DenseTensor& centers, const DenseTensor& tokens) {
  require(centers.rank() == 2 && tokens.rank() == 2 && centers.dim(1) == tokens.dim(1), ErrorCode::kShapeMismatch,
          "centers " + shape_str(centers.shape()) + " vs tokens " + shape_str(tokens.shape()));
  DenseTensor s({centers.dim(0), tokens.dim(0)});
  for (std::size_t k = 0; k < centers.dim(0); ++k)
    for (std::size_t l = 0; l < tokens.dim(0); ++l) s.at(k, l) = cosine(centers.row(k), tokens.row(l));
  return s;
}

inline double loss_mc(const DenseTensor& centers, const DenseTensor& adv_tokens, const DenseTensor& plan) {
  const DenseTensor sim = similarity(centers, adv_tokens);
  sim.check_same_shape(plan);
  double s = 0.0;
  for (std::size_t i = 0; i < sim.size(); ++i) s += sim[i] * plan[i];
  return s;
}

struct Gate {
  std::vector<double> alignability;  // r_l
  std::vector<double> weight;        // w_l in (0, 1)
};

inline Gate gate_from_similarity(const DenseTensor& sim, const RoutingParams& p) {
  Gate g;
  const std::size_t K = sim.dim(0), L = sim.dim(1);
  g.alignability.resize(L);
  g.weight.resize(L);
  for (std::size_t l = 0; l < L; ++l) {
    double r = sim.at(0, l);
    for (std::size_t k = 1; k < K; ++k) r = std::max(r, sim.at(k, l));
    g.alignability[l] = r;
    g.weight[l] = logistic((r - p.gamma) / p.sharpness);
  }
  return g;
}

inline Gate routing_gate(const DenseTensor& adv_tokens, const DenseTensor& centers, const RoutingParams& p) {
  require(p.sharpness > 0.0, ErrorCode::kInvalidArgument, "gate sharpness must be positive");
  return gate_from_similarity(similarity(centers, adv_tokens), p);
}

inline double preservation(const DenseTensor& adv_tokens, const DenseTensor& src_tokens,
                           std::span<const double> gate_weight) {
  adv_tokens.check_same_shape(src_tokens);
  double s = 0.0;
  for (std::size_t l = 0; l < adv_tokens.dim(0); ++l)
    s += (1.0 - gate_weight[l]) * cosine(adv_tokens.row(l), src_tokens.row(l));
  return s;
}

inline double loss_tr(const DenseTensor& centers, const DenseTensor& adv_tokens, const DenseTensor& src_tokens,
                      const DenseTensor& plan, const RoutingParams& p) {
  const DenseTensor sim = similarity(centers, adv_tokens);
  sim.check_same_shape(plan);
  const Gate gate = gate_from_similarity(sim, p);
  double aligned = 0.0;
  for (std::size_t k = 0; k < sim.dim(0); ++k)
    for (std::size_t l = 0; l < sim.dim(1); ++l) aligned += gate.weight[l] * sim.at(k, l) * plan.at(k, l);
  const double kept = p.lambda_pre > 0.0 ? preservation(adv_tokens, src_tokens, gate.weight) : 0.0;
  return aligned + p.lambda_pre * kept;
}

// Mean cosine between the adversarial global feature and each target crop's global feature.
inline double loss_coa(const DenseTensor& adv_global, std::span<const DenseTensor> target_globals) {
  require(!target_globals.empty(), ErrorCode::kInvalidArgument, "no target globals");
  double s = 0.0;
  for (const auto& g : target_globals) s += cosine(adv_global, g);
  return s / static_cast<double>(target_globals.size());
}

struct EnsembleState {
  std::vector<double> weights;
  std::vector<double> ema_loss;

  static EnsembleState uniform(std::size_t t) {
    require(t >= 1, ErrorCode::kInvalidArgument, "ensemble of size 0");
    return {std::vector<double>(t, 1.0 / static_cast<double>(t)), std::vector<double>(t, 0.0)};
  }
};

struct EnsembleRule {
  double decay = 0.9;
  double temperature = 0.5;
};

// EMA of each encoder's loss, then W = softmax(-ema / T). The loss is a
// similarity being maximized, so the least-fooled encoder gets the most weight.
inline EnsembleState update_ensemble(const EnsembleState& state, std::span<const double> losses,
                                     const EnsembleRule& rule = {}) {
  require(losses.size() == state.weights.size() && !losses.empty(), ErrorCode::kShapeMismatch,
          "loss count does not match ensemble size");
  EnsembleState next = state;
  for (std::size_t i = 0; i < losses.size(); ++i) {
    require(std::isfinite(losses[i]), ErrorCode::kNonFinite, "encoder loss not finite");
    next.ema_loss[i] = rule.decay * state.ema_loss[i] + (1.0 - rule.decay) * losses[i];
  }
  double lo = next.ema_loss[0];
  for (double e : next.ema_loss) lo = std::min(lo, e);
  double z = 0.0;
  for (std::size_t i = 0; i < losses.size(); ++i) {
    next.weights[i] = std::exp(-(next.ema_loss[i] - lo) / rule.temperature);
    z += next.weights[i];
  }
  for (double& w : next.weights) w /= z;
  return next;
}

// Target features for a chosen set of crops under every train encoder.
struct TargetSet {
  std::vector<std::vector<CropFeatures>> per_encoder;  // [encoder][crop]

  std::size_t num_encoders() const { return per_encoder.size(); }
  std::size_t num_crops() const { return per_encoder.empty() ? 0 : per_encoder.front().size(); }

  static TargetSet from_bank(const TargetBank& bank, std::span<const std::size_t> crops) {
    TargetSet t;
    t.per_encoder.resize(bank.num_encoders());
    for (std::size_t e = 0; e < bank.num_encoders(); ++e)
      for (std::size_t c : crops) t.per_encoder[e].push_back({bank.centers(e, c), bank.global_feat(e, c)});
    return t;
  }

  static TargetSet from_bank(const TargetBank& bank) {
    std::vector<std::size_t> all(bank.num_crops());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    return from_bank(bank, all);
  }
};

// Plans and gates per (encoder, crop), either captured at one point or
// imposed when evaluating at another. Lets finite differences see the same
// frozen quantities the analytic gradient treats as constants.
struct Couplings {
  std::vector<DenseTensor> plans;
  std::vector<std::vector<double>> gates;
};

struct LossOptions {
  bool want_grad = true;
  const Couplings* frozen = nullptr;  // use these plans (stop mode) and gates
  Couplings* capture = nullptr;       // record plans and gates
  // Clean-source tokens per encoder for this source crop; computed when null.
  const std::vector<DenseTensor>* src_tokens = nullptr;
};

struct LossBreakdown {
  double total = 0.0;
  std::vector<double> per_encoder;  // crop-mean L_TR + lambda_coa L_coa
  std::vector<double> tr;           // crop-mean L_TR
  std::vector<double> coa;          // crop-mean L_coa
  double mean_gate = 0.0;
  DenseTensor grad;                 // d total / d delta (empty when not requested)
};

// Loss of one encoder's adversarial features against a target set's crops for
// that encoder. Accumulates d loss / d tokens and d loss / d global (scaled
// by `scale`) when the gradient outputs are non-null.
struct EncoderLoss {
  double tr = 0.0;
  double coa = 0.0;
  double gate_sum = 0.0;
};

inline EncoderLoss encoder_loss(const EncoderOutput& adv, const DenseTensor* src_tokens,
                                std::span<const CropFeatures> crops, const AlignmentParams& ap, double scale,
                                DenseTensor* grad_tokens, DenseTensor* grad_global, const Couplings* frozen,
                                Couplings* capture, std::size_t coupling_offset) {
  const RoutingParams& rp = ap.routing;
  const std::size_t L = adv.tokens.dim(0);
  const double inv_c = 1.0 / static_cast<double>(crops.size());
  EncoderLoss out;
  for (std::size_t c = 0; c < crops.size(); ++c) {
    const DenseTensor& centers = crops[c].centers;
    const DenseTensor sim = similarity(centers, adv.tokens);
    const std::size_t K = sim.dim(0);
    const std::size_t slot = coupling_offset + c;

    std::unique_ptr<Sinkhorn> solver;
    DenseTensor plan;
    if (frozen != nullptr && ap.ot_gradient == OtGradient::kStop) {
      plan = frozen->plans.at(slot);
    } else {
      solver = std::make_unique<Sinkhorn>(sim, ap.sinkhorn);
      plan = solver->plan();
    }
    std::vector<double> w = frozen != nullptr ? frozen->gates.at(slot) : gate_from_similarity(sim, rp).weight;
    if (capture != nullptr) {
      capture->plans.push_back(plan);
      capture->gates.push_back(w);
    }

    double aligned = 0.0;
    for (std::size_t k = 0; k < K; ++k)
      for (std::size_t l = 0; l < L; ++l) aligned += w[l] * sim.at(k, l) * plan.at(k, l);
    double kept = 0.0;
    const bool preserve = rp.lambda_pre > 0.0 && src_tokens != nullptr;
    if (preserve)
      for (std::size_t l = 0; l < L; ++l) kept += (1.0 - w[l]) * cosine(adv.tokens.row(l), src_tokens->row(l));
    const double coa = cosine(adv.global_feat, crops[c].global_feat);
    out.tr += (aligned + rp.lambda_pre * kept) * inv_c;
    out.coa += coa * inv_c;
    for (double v : w) out.gate_sum += v;

    if (grad_tokens == nullptr) continue;
    const double s = scale * inv_c;
    // d/d sim from the aligned term (plan held fixed) ...
    DenseTensor dsim({K, L});
    for (std::size_t k = 0; k < K; ++k)
      for (std::size_t l = 0; l < L; ++l) dsim.at(k, l) = w[l] * plan.at(k, l);
    // ... plus the path through the plan when it is differentiated.
    if (ap.ot_gradient == OtGradient::kUnrolled) {
      DenseTensor dplan({K, L});
      for (std::size_t k = 0; k < K; ++k)
        for (std::size_t l = 0; l < L; ++l) dplan.at(k, l) = w[l] * sim.at(k, l);
      dsim += solver->vjp(dplan);
    }
    for (std::size_t k = 0; k < K; ++k)
      for (std::size_t l = 0; l < L; ++l)
        if (dsim.at(k, l) != 0.0) cosine_grad_b(centers.row(k), adv.tokens.row(l), s * dsim.at(k, l), grad_tokens->row(l));
    if (preserve)
      for (std::size_t l = 0; l < L; ++l)
        cosine_grad_b(src_tokens->row(l), adv.tokens.row(l), s * rp.lambda_pre * (1.0 - w[l]), grad_tokens->row(l));
    cosine_grad_b(crops[c].global_feat.data(), adv.global_feat.data(), s * rp.lambda_coa, grad_global->data());
  }
  return out;
}

// Total loss of one (source, source crop) pair against a target set, and its
// gradient with respect to the universal perturbation.
inline LossBreakdown total_loss_and_grad(const DenseTensor& delta, const DenseTensor& source,
                                         const CropSpec& source_crop, const TargetSet& targets,
                                         const std::vector<EncoderPtr>& ensemble, const EnsembleState& state,
                                         const AlignmentParams& ap, const LossOptions& opt = {}) {
  delta.check_same_shape(source);
  require(targets.num_encoders() == ensemble.size() && state.weights.size() == ensemble.size(),
          ErrorCode::kShapeMismatch, "target set / ensemble state / ensemble sizes differ");
  require(targets.num_crops() >= 1, ErrorCode::kInvalidArgument, "empty target crop set");
  const std::size_t H = source.dim(0), W = source.dim(1);
  const std::size_t side = ensemble.front()->dims().image_size;

  DenseTensor adv_full = source;
  adv_full += delta;
  const DenseTensor adv_img = crop_resize(adv_full, source_crop, side, side);
  const bool need_src = ap.routing.lambda_pre > 0.0;
  if (opt.src_tokens != nullptr)
    require(opt.src_tokens->size() == ensemble.size(), ErrorCode::kShapeMismatch, "one source token block per encoder");
  DenseTensor src_img;
  if (need_src && opt.src_tokens == nullptr) src_img = crop_resize(source, source_crop, side, side);

  LossBreakdown out;
  out.per_encoder.resize(ensemble.size());
  out.tr.resize(ensemble.size());
  out.coa.resize(ensemble.size());
  DenseTensor grad_img;
  double gate_sum = 0.0;
  std::size_t gate_count = 0;
  for (std::size_t i = 0; i < ensemble.size(); ++i) {
    const auto rec = ensemble[i]->record(adv_img);
    const EncoderOutput& adv = rec->output();
    DenseTensor src_tokens;
    if (need_src) src_tokens = opt.src_tokens != nullptr ? (*opt.src_tokens)[i] : ensemble[i]->forward(src_img).tokens;
    DenseTensor gt, gg;
    if (opt.want_grad) {
      gt = DenseTensor::zeros_like(adv.tokens);
      gg = DenseTensor::zeros_like(adv.global_feat);
    }
    const EncoderLoss el = encoder_loss(adv, need_src ? &src_tokens : nullptr, targets.per_encoder[i], ap,
                                        state.weights[i], opt.want_grad ? &gt : nullptr,
                                        opt.want_grad ? &gg : nullptr, opt.frozen, opt.capture,
                                        i * targets.num_crops());
    out.tr[i] = el.tr;
    out.coa[i] = el.coa;
    out.per_encoder[i] = el.tr + ap.routing.lambda_coa * el.coa;
    out.total += state.weights[i] * out.per_encoder[i];
    gate_sum += el.gate_sum;
    gate_count += adv.tokens.dim(0) * targets.num_crops();
    if (opt.want_grad) {
      DenseTensor g = rec->backward(gt, gg);
      if (grad_img.empty())
        grad_img = std::move(g);
      else
        grad_img += g;
    }
  }
  out.mean_gate = gate_sum / static_cast<double>(gate_count);
  if (opt.want_grad) {
    out.grad = crop_resize_adjoint(grad_img, source_crop, H, W);
    require(out.grad.all_finite(), ErrorCode::kNonFiniteGradient, "gradient w.r.t. delta is not finite");
  }
  return out;
}

}  // namespace uap
