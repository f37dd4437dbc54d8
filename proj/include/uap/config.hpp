// Copyright (c) 2026 The uap Authors
// SPDX-License-Identifier: Apache-2.0
//
// Run configuration. Serialized as one flat JSON object; missing keys take
// the defaults below, unknown keys are rejected.

#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "uap/alignment.hpp"
#include "uap/error.hpp"
#include "uap/meta_opt.hpp"
#include "uap/target_bank.hpp"

namespace uap {

struct Toggles {
  bool mca = true;
  bool agc = true;
  bool tr = true;
  bool meta_init = true;
};

struct RunConfig {
  MetaConfig meta;
  RoutingParams routing;
  SinkhornOptions sinkhorn;
  OtGradient ot_gradient = OtGradient::kStop;
  EnsembleRule ensemble;

  std::string encoder_kind = "toy";
  std::vector<std::uint64_t> train_encoder_seeds = {101, 102, 103};
  std::uint64_t heldout_encoder_seed = 999;
  EncoderDims dims;

  std::size_t clusters = 4;
  double crop_scale_min = 0.5;
  Toggles toggles;

  std::string source_pool = "pools/source";
  std::string target_pool = "pools/target";
  std::string unseen_pool = "pools/unseen";
  std::string bank_dir = "out/banks";
  std::string output_dir = "out";

  std::uint64_t seed = 0;
  bool assert_budget = true;
  // Stage-2 steps at which an extra perturbation snapshot is written and evaluated.
  std::vector<std::size_t> snapshot_steps;

  void validate() const {
    meta.validate();
    routing.validate();
    require(sinkhorn.reg > 0.0 && sinkhorn.iters >= 1, ErrorCode::kConfigInvalid, "sinkhorn reg/iters invalid");
    require(ensemble.decay >= 0.0 && ensemble.decay < 1.0 && ensemble.temperature > 0.0, ErrorCode::kConfigInvalid,
            "ensemble decay must be in [0, 1) and temperature > 0");
    require(!train_encoder_seeds.empty(), ErrorCode::kConfigInvalid, "need at least one train encoder");
    std::set<std::uint64_t> seen(train_encoder_seeds.begin(), train_encoder_seeds.end());
    require(seen.size() == train_encoder_seeds.size(), ErrorCode::kConfigInvalid, "train encoder seeds repeat");
    require(!seen.count(heldout_encoder_seed), ErrorCode::kConfigInvalid,
            "held-out encoder seed must differ from the train seeds");
    require(dims.patch >= 1 && dims.embed_dim >= 1 && dims.channels >= 1 && dims.image_size >= dims.patch &&
                dims.image_size % dims.patch == 0,
            ErrorCode::kConfigInvalid, "image_size must be a positive multiple of patch");
    require(clusters >= 1 && clusters <= dims.tokens(), ErrorCode::kConfigInvalid,
            "clusters must be in [1, tokens per crop]");
    require(crop_scale_min > 0.0 && crop_scale_min <= 1.0, ErrorCode::kConfigInvalid,
            "crop_scale_min must be in (0, 1]");
    require(toggles.mca ? (meta.crops >= 1 || toggles.agc) : true, ErrorCode::kConfigInvalid,
            "crop set is empty: m=0 with AGC off");
    for (std::size_t s : snapshot_steps)
      require(s >= 1 && s <= meta.adapt_steps, ErrorCode::kConfigInvalid, "snapshot step outside [1, adapt_steps]");
  }

  // Hyperparameters with the component toggles applied.
  RunConfig effective() const {
    RunConfig e = *this;
    if (!toggles.mca) e.meta.crops = 0;
    if (!toggles.tr) {
      e.routing.gamma = -1e6;
      e.routing.lambda_pre = 0.0;
    }
    return e;
  }

  CropSettings crop_settings() const { return {crop_scale_min, dims.image_size, dims.patch}; }

  AttackSettings attack_settings() const {
    const RunConfig e = effective();
    AttackSettings s;
    s.align.routing = e.routing;
    s.align.sinkhorn = e.sinkhorn;
    s.align.ot_gradient = e.ot_gradient;
    s.ensemble_rule = e.ensemble;
    s.crop = e.crop_settings();
    s.clusters = e.clusters;
    s.resample_target_crops = !toggles.mca;
    return s;
  }

  // Banks exist only when the fixed crop set is in use.
  bool uses_banks() const { return toggles.mca; }

  BankSettings bank_settings() const {
    const RunConfig e = effective();
    BankSettings b;
    b.crops = e.meta.crops;
    b.attention_crop = toggles.agc;
    b.clusters = e.clusters;
    b.crop = e.crop_settings();
    b.dims = e.dims;
    b.encoder_kind = e.encoder_kind;
    b.encoder_seeds = e.train_encoder_seeds;
    b.seed = e.seed;
    return b;
  }
};

inline std::string to_string(OtGradient g) { return g == OtGradient::kStop ? "stop" : "unrolled"; }

inline OtGradient ot_gradient_from_string(const std::string& s) {
  if (s == "stop") return OtGradient::kStop;
  if (s == "unrolled") return OtGradient::kUnrolled;
  fail(ErrorCode::kConfigInvalid, "ot_gradient must be \"stop\" or \"unrolled\", got \"" + s + "\"");
}

inline nlohmann::ordered_json to_json(const RunConfig& c) {
  nlohmann::ordered_json j;
  j["meta_epochs"] = c.meta.meta_epochs;
  j["task_batch"] = c.meta.task_batch;
  j["meta_inner_steps"] = c.meta.meta_inner_steps;
  j["meta_inner_step_size"] = c.meta.meta_inner_step_size;
  j["reptile_rate"] = c.meta.reptile_rate;
  j["adapt_steps"] = c.meta.adapt_steps;
  j["adapt_step_size"] = c.meta.adapt_step_size;
  j["sources_per_task"] = c.meta.sources_per_task;
  j["crops"] = c.meta.crops;
  j["eps"] = c.meta.eps;
  j["gamma"] = c.routing.gamma;
  j["gate_sharpness"] = c.routing.sharpness;
  j["lambda_pre"] = c.routing.lambda_pre;
  j["lambda_coa"] = c.routing.lambda_coa;
  j["sinkhorn_reg"] = c.sinkhorn.reg;
  j["sinkhorn_iters"] = c.sinkhorn.iters;
  j["ot_gradient"] = to_string(c.ot_gradient);
  j["ensemble_decay"] = c.ensemble.decay;
  j["ensemble_temperature"] = c.ensemble.temperature;
  j["encoder_kind"] = c.encoder_kind;
  j["train_encoder_seeds"] = c.train_encoder_seeds;
  j["heldout_encoder_seed"] = c.heldout_encoder_seed;
  j["image_size"] = c.dims.image_size;
  j["channels"] = c.dims.channels;
  j["patch"] = c.dims.patch;
  j["embed_dim"] = c.dims.embed_dim;
  j["clusters"] = c.clusters;
  j["crop_scale_min"] = c.crop_scale_min;
  j["mca"] = c.toggles.mca;
  j["agc"] = c.toggles.agc;
  j["tr"] = c.toggles.tr;
  j["meta_init"] = c.toggles.meta_init;
  j["source_pool"] = c.source_pool;
  j["target_pool"] = c.target_pool;
  j["unseen_pool"] = c.unseen_pool;
  j["bank_dir"] = c.bank_dir;
  j["output_dir"] = c.output_dir;
  j["seed"] = c.seed;
  j["assert_budget"] = c.assert_budget;
  j["snapshot_steps"] = c.snapshot_steps;
  return j;
}

namespace detail {

template <class T>
void take(const nlohmann::json& j, const char* key, T& out, std::set<std::string>& used) {
  used.insert(key);
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::kConfigInvalid, std::string("config key \"") + key + "\": " + e.what());
  }
}

}  // namespace detail

inline RunConfig config_from_json(const nlohmann::json& j) {
  require(j.is_object(), ErrorCode::kConfigInvalid, "config must be a JSON object");
  RunConfig c;
  std::set<std::string> used;
  using detail::take;
  take(j, "meta_epochs", c.meta.meta_epochs, used);
  take(j, "task_batch", c.meta.task_batch, used);
  take(j, "meta_inner_steps", c.meta.meta_inner_steps, used);
  take(j, "meta_inner_step_size", c.meta.meta_inner_step_size, used);
  take(j, "reptile_rate", c.meta.reptile_rate, used);
  take(j, "adapt_steps", c.meta.adapt_steps, used);
  take(j, "adapt_step_size", c.meta.adapt_step_size, used);
  take(j, "sources_per_task", c.meta.sources_per_task, used);
  take(j, "crops", c.meta.crops, used);
  take(j, "eps", c.meta.eps, used);
  take(j, "gamma", c.routing.gamma, used);
  take(j, "gate_sharpness", c.routing.sharpness, used);
  take(j, "lambda_pre", c.routing.lambda_pre, used);
  take(j, "lambda_coa", c.routing.lambda_coa, used);
  take(j, "sinkhorn_reg", c.sinkhorn.reg, used);
  take(j, "sinkhorn_iters", c.sinkhorn.iters, used);
  std::string otg = to_string(c.ot_gradient);
  take(j, "ot_gradient", otg, used);
  c.ot_gradient = ot_gradient_from_string(otg);
  take(j, "ensemble_decay", c.ensemble.decay, used);
  take(j, "ensemble_temperature", c.ensemble.temperature, used);
  take(j, "encoder_kind", c.encoder_kind, used);
  take(j, "train_encoder_seeds", c.train_encoder_seeds, used);
  take(j, "heldout_encoder_seed", c.heldout_encoder_seed, used);
  take(j, "image_size", c.dims.image_size, used);
  take(j, "channels", c.dims.channels, used);
  take(j, "patch", c.dims.patch, used);
  take(j, "embed_dim", c.dims.embed_dim, used);
  take(j, "clusters", c.clusters, used);
  take(j, "crop_scale_min", c.crop_scale_min, used);
  take(j, "mca", c.toggles.mca, used);
  take(j, "agc", c.toggles.agc, used);
  take(j, "tr", c.toggles.tr, used);
  take(j, "meta_init", c.toggles.meta_init, used);
  take(j, "source_pool", c.source_pool, used);
  take(j, "target_pool", c.target_pool, used);
  take(j, "unseen_pool", c.unseen_pool, used);
  take(j, "bank_dir", c.bank_dir, used);
  take(j, "output_dir", c.output_dir, used);
  take(j, "seed", c.seed, used);
  take(j, "assert_budget", c.assert_budget, used);
  take(j, "snapshot_steps", c.snapshot_steps, used);
  for (const auto& [key, value] : j.items())
    require(used.count(key) > 0, ErrorCode::kConfigInvalid, "unknown config key \"" + key + "\"");
  c.validate();
  return c;
}

inline RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  require(in.is_open(), ErrorCode::kIoError, "cannot open config " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::kConfigInvalid, "config " + path.string() + " is not valid JSON: " + e.what());
  }
  return config_from_json(j);
}

}  // namespace uap
