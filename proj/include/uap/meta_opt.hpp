// Copyright (c) 2026 The uap Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "uap/alignment.hpp"
#include "uap/error.hpp"
#include "uap/parallel.hpp"
#include "uap/rng.hpp"
#include "uap/sampler.hpp"
#include "uap/target_bank.hpp"
#include "uap/tensor.hpp"

namespace uap {

// l_inf-bounded perturbation. Every public producer returns a value with
// |delta|_inf <= eps.
struct Perturbation {
  DenseTensor delta;
  double eps = 16.0 / 255.0;

  static Perturbation zeros(const Shape& shape, double eps) { return {DenseTensor(shape, 0.0), eps}; }
  bool within_budget() const { return delta.linf_norm() <= eps; }
};

struct MetaConfig {
  std::size_t meta_epochs = 125;          // E
  std::size_t task_batch = 16;            // B
  std::size_t meta_inner_steps = 5;       // I
  double meta_inner_step_size = 1.0 / 255.0;
  double reptile_rate = 1.0;
  std::size_t adapt_steps = 300;          // M
  double adapt_step_size = 1.0 / 255.0;   // alpha
  std::size_t sources_per_task = 20;      // N
  std::size_t crops = 4;                  // m
  double eps = 16.0 / 255.0;

  void validate() const {
    // Zero inner or adaptation steps are accepted as no-op loops.
    require(meta_epochs >= 1 && task_batch >= 1 && sources_per_task >= 1, ErrorCode::kConfigInvalid,
            "meta_epochs, task_batch and sources_per_task must be >= 1");
    require(meta_inner_step_size > 0 && reptile_rate > 0 && adapt_step_size > 0, ErrorCode::kConfigInvalid,
            "step sizes must be positive");
    require(eps > 0, ErrorCode::kConfigInvalid, "budget must be positive");
  }
};

// Counts projected updates and budget violations across a run.
struct BudgetAudit {
  std::atomic<std::uint64_t> updates{0};
  std::atomic<std::uint64_t> violations{0};
};

struct InnerLoopSpec {
  std::size_t steps = 0;
  double step_size = 1.0 / 255.0;
  double eps = 16.0 / 255.0;
  BudgetAudit* audit = nullptr;
  bool assert_budget = true;
};

struct StepLoss {
  double loss = 0.0;
  DenseTensor grad;
};

struct NoStepObserver {
  void operator()(std::size_t /*step*/, const DenseTensor& /*delta*/) const {}
};

// One projected sign-ascent update.
inline void sign_step(DenseTensor& delta, const DenseTensor& grad, double step_size, double eps) {
  delta.check_same_shape(grad);
  for (std::size_t i = 0; i < delta.size(); ++i) {
    const double g = grad[i];
    const double s = g > 0.0 ? step_size : (g < 0.0 ? -step_size : 0.0);
    delta[i] = std::clamp(delta[i] + s, -eps, eps);
  }
}

// Objective contract for inner_update:
//   std::size_t num_sources() const;  std::size_t num_crops() const;
//   void begin_step(std::size_t step);
//   StepLoss evaluate(const DenseTensor& delta, std::size_t step, std::size_t source, std::size_t crop);
//   void end_step(std::size_t step, const DenseTensor& delta);
// Steps run sources-outer, crops-inner with one update per (source, crop).
// `observe(step + 1, delta)` fires after every completed step.
template <class Objective, class Observer = NoStepObserver>
Perturbation inner_update(Perturbation start, const InnerLoopSpec& spec, Objective& objective,
                          Observer&& observe = {}) {
  require(start.within_budget(), ErrorCode::kBudgetViolation, "initial perturbation exceeds the budget");
  DenseTensor delta = std::move(start.delta);
  for (std::size_t step = 0; step < spec.steps; ++step) {
    objective.begin_step(step);
    for (std::size_t s = 0; s < objective.num_sources(); ++s)
      for (std::size_t c = 0; c < objective.num_crops(); ++c) {
        StepLoss r;
        try {
          r = objective.evaluate(delta, step, s, c);
        } catch (const Error& e) {
          if (e.code() == ErrorCode::kNonFiniteGradient || e.code() == ErrorCode::kNonFinite)
            fail(ErrorCode::kNonFiniteGradient, "step " + std::to_string(step) + ", source " + std::to_string(s) +
                                                    ", crop " + std::to_string(c) + ": " + e.what());
          throw;
        }
        sign_step(delta, r.grad, spec.step_size, spec.eps);
        if (spec.audit != nullptr) spec.audit->updates.fetch_add(1, std::memory_order_relaxed);
        if (delta.linf_norm() > spec.eps) {
          if (spec.audit != nullptr) spec.audit->violations.fetch_add(1, std::memory_order_relaxed);
          require(!spec.assert_budget, ErrorCode::kBudgetViolation,
                  "budget exceeded at step " + std::to_string(step));
        }
      }
    objective.end_step(step, delta);
    observe(step + 1, std::as_const(delta));
  }
  return {std::move(delta), spec.eps};
}

// delta0 + rate * (mean(task) - delta0), projected. The mean displacement is
// accumulated relative to delta0 so identical task results leave delta0
// bit-for-bit unchanged.
inline Perturbation reptile_step(const Perturbation& delta0, std::span<const Perturbation> tasks, double rate) {
  require(!tasks.empty(), ErrorCode::kInvalidArgument, "reptile step needs at least one task");
  DenseTensor drift = DenseTensor::zeros_like(delta0.delta);
  for (const auto& t : tasks) {
    t.delta.check_same_shape(delta0.delta);
    require(t.eps == delta0.eps, ErrorCode::kShapeMismatch, "task budget differs from the initialization's");
    for (std::size_t i = 0; i < drift.size(); ++i) drift[i] += t.delta[i] - delta0.delta[i];
  }
  const double inv_b = 1.0 / static_cast<double>(tasks.size());
  DenseTensor next = delta0.delta;
  for (std::size_t i = 0; i < next.size(); ++i) next[i] += rate * (drift[i] * inv_b);
  return {clamp_linf(std::move(next), delta0.eps), delta0.eps};
}

// Stream tags for the top-level phases.
enum class Phase : std::uint64_t { kStage1 = 1, kStage2 = 2, kBank = 3, kEval = 4, kStudy = 5, kPool = 6 };

inline std::uint64_t tag(Phase p) { return static_cast<std::uint64_t>(p); }

struct AttackSettings {
  AlignmentParams align;
  EnsembleRule ensemble_rule;
  CropSettings crop;
  std::size_t clusters = 4;
  // Draw one fresh target crop per step (no fixed crop set) instead of
  // iterating over the bank's crops.
  bool resample_target_crops = false;
};

struct TraceRow {
  std::uint64_t task_id = 0;
  std::size_t step = 0;
  double total = 0.0;
  std::vector<double> tr, coa, weights;
  double grad_l2 = 0.0;
  double mean_gate = 0.0;
};

// Alignment objective for one target and its source support set.
class AttackObjective {
 public:
  AttackObjective(const DenseTensor& target, std::vector<const DenseTensor*> sources,
                  std::shared_ptr<const TargetBank> bank, const std::vector<EncoderPtr>& ensemble,
                  const AttackSettings& settings, SeededRng rng, std::uint64_t task_id)
      : target_(target),
        sources_(std::move(sources)),
        bank_(std::move(bank)),
        ensemble_(ensemble),
        settings_(settings),
        rng_(rng),
        task_id_(task_id),
        state_(EnsembleState::uniform(ensemble.size())) {
    require(!sources_.empty(), ErrorCode::kInvalidArgument, "no source images");
    if (!settings_.resample_target_crops) {
      require(bank_ != nullptr, ErrorCode::kInvalidArgument, "fixed crop mode needs a target bank");
      require(bank_->num_encoders() == ensemble_.size(), ErrorCode::kShapeMismatch,
              "bank was built for a different ensemble size");
      for (std::size_t c = 0; c < bank_->num_crops(); ++c) {
        const std::size_t one[] = {c};
        fixed_.push_back(TargetSet::from_bank(*bank_, one));
      }
    }
  }

  std::size_t num_sources() const { return sources_.size(); }
  std::size_t num_crops() const { return settings_.resample_target_crops ? 1 : fixed_.size(); }
  const EnsembleState& ensemble_state() const { return state_; }
  const std::vector<TraceRow>& trace() const { return trace_; }

  void begin_step(std::size_t step) {
    source_crops_.clear();
    src_tokens_.assign(sources_.size(), {});
    for (std::size_t s = 0; s < sources_.size(); ++s) {
      SeededRng r = rng_.derive({0x5C, step, s});
      source_crops_.push_back(random_crop_spec(sources_[s]->dim(0), sources_[s]->dim(1), r, settings_.crop));
    }
    if (settings_.resample_target_crops) {
      SeededRng r = rng_.derive({0x7C, step});
      const Crop crop = random_crop(target_, r, settings_.crop);
      TargetSet t;
      t.per_encoder.resize(ensemble_.size());
      for (std::size_t e = 0; e < ensemble_.size(); ++e)
        t.per_encoder[e].push_back(crop_features(*ensemble_[e], crop.image, settings_.clusters, r.derive({e})));
      fresh_ = std::move(t);
    }
    acc_ = TraceRow{};
    acc_.task_id = task_id_;
    acc_.step = step;
    acc_.tr.assign(ensemble_.size(), 0.0);
    acc_.coa.assign(ensemble_.size(), 0.0);
    evals_ = 0;
  }

  StepLoss evaluate(const DenseTensor& delta, std::size_t /*step*/, std::size_t source, std::size_t crop) {
    const TargetSet& targets = settings_.resample_target_crops ? fresh_ : fixed_[crop];
    LossOptions lo;
    if (settings_.align.routing.lambda_pre > 0.0) {
      // The clean source crop is fixed within a step; encode it once.
      auto& cache = src_tokens_[source];
      if (cache.empty()) {
        const std::size_t side = ensemble_.front()->dims().image_size;
        const DenseTensor img = crop_resize(*sources_[source], source_crops_[source], side, side);
        for (const auto& enc : ensemble_) cache.push_back(enc->forward(img).tokens);
      }
      lo.src_tokens = &cache;
    }
    LossBreakdown lb = total_loss_and_grad(delta, *sources_[source], source_crops_[source], targets, ensemble_,
                                           state_, settings_.align, lo);
    state_ = update_ensemble(state_, lb.per_encoder, settings_.ensemble_rule);
    acc_.total += lb.total;
    for (std::size_t e = 0; e < ensemble_.size(); ++e) {
      acc_.tr[e] += lb.tr[e];
      acc_.coa[e] += lb.coa[e];
    }
    acc_.grad_l2 += lb.grad.l2_norm();
    acc_.mean_gate += lb.mean_gate;
    ++evals_;
    return {lb.total, std::move(lb.grad)};
  }

  void end_step(std::size_t /*step*/, const DenseTensor& /*delta*/) {
    const double inv = evals_ ? 1.0 / static_cast<double>(evals_) : 0.0;
    acc_.total *= inv;
    for (auto& v : acc_.tr) v *= inv;
    for (auto& v : acc_.coa) v *= inv;
    acc_.grad_l2 *= inv;
    acc_.mean_gate *= inv;
    acc_.weights = state_.weights;
    trace_.push_back(acc_);
  }

 private:
  const DenseTensor& target_;
  std::vector<const DenseTensor*> sources_;
  std::shared_ptr<const TargetBank> bank_;
  const std::vector<EncoderPtr>& ensemble_;
  AttackSettings settings_;
  SeededRng rng_;
  std::uint64_t task_id_;
  EnsembleState state_;
  std::vector<TargetSet> fixed_;
  TargetSet fresh_;
  std::vector<CropSpec> source_crops_;
  std::vector<std::vector<DenseTensor>> src_tokens_;
  TraceRow acc_;
  std::size_t evals_ = 0;
  std::vector<TraceRow> trace_;
};

// Shared inputs of both stages.
struct AttackProblem {
  const ImagePool* sources = nullptr;
  const ImagePool* targets = nullptr;
  std::vector<std::shared_ptr<const TargetBank>> banks;  // one per target (may be null when resampling)
  std::vector<EncoderPtr> ensemble;
  AttackSettings settings;
};

struct EpochMetrics {
  std::size_t epoch = 0;
  std::vector<std::size_t> tasks;
  double mean_task_loss = 0.0;  // mean over tasks of the last inner step's mean loss
  double delta0_linf = 0.0;
  double delta0_shift_l2 = 0.0;
};

struct Stage1Hooks {
  std::size_t start_epoch = 0;  // resume point
  std::function<void(const EpochMetrics&, const Perturbation&, const std::vector<TraceRow>&)> on_epoch;
  BudgetAudit* audit = nullptr;
};

inline Perturbation stage1_meta_train(const MetaConfig& cfg, const AttackProblem& prob, Perturbation delta0,
                                      const SeededRng& rng, const Stage1Hooks& hooks = {}) {
  cfg.validate();
  require(prob.sources && prob.targets && prob.sources->size() > 0 && prob.targets->size() > 0,
          ErrorCode::kMissingPool, "stage 1 needs non-empty source and target pools");
  const std::size_t batch = std::min(cfg.task_batch, prob.targets->size());
  for (std::size_t epoch = hooks.start_epoch; epoch < cfg.meta_epochs; ++epoch) {
    SeededRng epoch_rng = rng.derive({tag(Phase::kStage1), epoch});
    const auto tasks = epoch_rng.sample_without_replacement(prob.targets->size(), batch);
    std::vector<Perturbation> results(batch);
    std::vector<std::vector<TraceRow>> traces(batch);
    std::vector<double> losses(batch);
    parallel_for(batch, [&](std::size_t b) {
      const std::size_t t = tasks[b];
      SeededRng task_rng = epoch_rng.derive({b});
      SeededRng src_rng = task_rng.derive({0x50});
      std::vector<const DenseTensor*> srcs;
      for (auto i : sample_source_indices(prob.sources->size(), cfg.sources_per_task, src_rng))
        srcs.push_back(&prob.sources->images[i]);
      AttackObjective obj(prob.targets->images[t], std::move(srcs), prob.banks.empty() ? nullptr : prob.banks[t],
                          prob.ensemble, prob.settings, task_rng.derive({0x0B}), t);
      InnerLoopSpec spec{cfg.meta_inner_steps, cfg.meta_inner_step_size, cfg.eps, hooks.audit, true};
      results[b] = inner_update(delta0, spec, obj);
      traces[b] = obj.trace();
      losses[b] = obj.trace().empty() ? 0.0 : obj.trace().back().total;
    });
    Perturbation next = reptile_step(delta0, results, cfg.reptile_rate);
    if (hooks.audit != nullptr) {
      hooks.audit->updates.fetch_add(1);
      if (!next.within_budget()) hooks.audit->violations.fetch_add(1);
    }
    require(next.within_budget(), ErrorCode::kBudgetViolation, "reptile step left the budget");
    EpochMetrics m;
    m.epoch = epoch;
    m.tasks = tasks;
    for (double l : losses) m.mean_task_loss += l / static_cast<double>(batch);
    m.delta0_linf = next.delta.linf_norm();
    m.delta0_shift_l2 = (next.delta - delta0.delta).l2_norm();
    delta0 = std::move(next);
    if (hooks.on_epoch) {
      std::vector<TraceRow> rows;
      for (auto& t : traces) rows.insert(rows.end(), t.begin(), t.end());
      hooks.on_epoch(m, delta0, rows);
    }
  }
  return delta0;
}

struct Stage2Result {
  Perturbation delta;
  std::vector<std::size_t> seen_sources;  // indices into the source pool
  std::vector<TraceRow> trace;
  std::vector<std::pair<std::size_t, Perturbation>> snapshots;
};

// Fresh N-source sample for the target, then M projected sign steps from delta0.
inline Stage2Result stage2_adapt(const Perturbation& delta0, std::size_t target, const MetaConfig& cfg,
                                 const AttackProblem& prob, const SeededRng& rng,
                                 std::span<const std::size_t> snapshot_steps = {}, BudgetAudit* audit = nullptr) {
  cfg.validate();
  require(delta0.within_budget(), ErrorCode::kBudgetViolation, "meta initialization exceeds the budget");
  require(prob.sources && prob.targets && target < prob.targets->size(), ErrorCode::kMissingPool,
          "stage 2 target out of range");
  SeededRng task_rng = rng.derive({tag(Phase::kStage2), target});
  SeededRng src_rng = task_rng.derive({0x50});
  Stage2Result out;
  out.seen_sources = sample_source_indices(prob.sources->size(), cfg.sources_per_task, src_rng);
  std::vector<const DenseTensor*> srcs;
  for (auto i : out.seen_sources) srcs.push_back(&prob.sources->images[i]);
  AttackObjective obj(prob.targets->images[target], std::move(srcs),
                      prob.banks.empty() ? nullptr : prob.banks[target], prob.ensemble, prob.settings,
                      task_rng.derive({0x0B}), target);
  InnerLoopSpec spec{cfg.adapt_steps, cfg.adapt_step_size, cfg.eps, audit, true};
  out.delta = inner_update(delta0, spec, obj, [&](std::size_t done, const DenseTensor& d) {
    for (std::size_t s : snapshot_steps)
      if (s == done) out.snapshots.emplace_back(done, Perturbation{d, cfg.eps});
  });
  out.trace = obj.trace();
  return out;
}

}  // namespace uap
