// Copyright (c) 2026 The uap Authors
// SPDX-License-Identifier: Apache-2.0
//
// Experiment orchestration: pools, banks, the two optimization stages, proxy
// evaluation on a held-out encoder, the crop-variance studies and the
// ablation grids. Every CSV has a fixed header and row order.

#pragma once

#include <charconv>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "uap/config.hpp"
#include "uap/encoder.hpp"
#include "uap/hash.hpp"
#include "uap/image.hpp"
#include "uap/meta_opt.hpp"
#include "uap/ntf.hpp"
#include "uap/parallel.hpp"
#include "uap/sampler.hpp"
#include "uap/synthetic.hpp"
#include "uap/target_bank.hpp"
#include "uap/toy_encoder.hpp"

namespace uap {

namespace fs = std::filesystem;

// Shortest round-trip decimal form, so CSVs are byte-stable.
inline std::string fmt(double v) {
  char buf[32];
  auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  (void)ec;
  return std::string(buf, end);
}

inline void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(out.is_open(), ErrorCode::kIoError, "cannot open " + path.string());
  out << text;
  require(out.good(), ErrorCode::kIoError, "write failed for " + path.string());
}

inline std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.is_open(), ErrorCode::kIoError, "cannot open " + path.string());
  std::ostringstream s;
  s << in.rdbuf();
  return std::move(s).str();
}

inline SeededRng master_rng(std::uint64_t seed) { return SeededRng(seed, stream_key({0x756170ULL})); }

// ---------------------------------------------------------------------------
// Pools

inline constexpr std::uint64_t kSourceIdBase = 0;
inline constexpr std::uint64_t kTargetIdBase = 1ULL << 32;
inline constexpr std::uint64_t kUnseenIdBase = 2ULL << 32;

struct Pools {
  ImagePool sources;  // seen candidates (Stage-1 and Stage-2 draw from here)
  ImagePool targets;
  ImagePool unseen;   // evaluation only

  void validate(const EncoderDims& dims) const {
    require(sources.size() > 0 && targets.size() > 0 && unseen.size() > 0, ErrorCode::kMissingPool,
            "source, target and unseen pools must be non-empty");
    for (const ImagePool* p : {&sources, &targets, &unseen})
      require(p->images.front().dim(2) == dims.channels, ErrorCode::kShapeMismatch,
              "pool channel count differs from the encoder's");
    require(sources.images.front().shape() == targets.images.front().shape() &&
                sources.images.front().shape() == unseen.images.front().shape(),
            ErrorCode::kShapeMismatch, "all pools must share one image shape");
    std::set<std::uint64_t> ids(sources.ids.begin(), sources.ids.end());
    for (auto id : unseen.ids)
      require(!ids.count(id), ErrorCode::kInvalidArgument, "unseen pool shares an id with the source pool");
  }
};

inline Pools load_pools(const RunConfig& cfg) {
  Pools p;
  p.sources = ImagePool::load_dir(cfg.source_pool, PoolRole::kSource, kSourceIdBase);
  p.targets = ImagePool::load_dir(cfg.target_pool, PoolRole::kTarget, kTargetIdBase);
  p.unseen = ImagePool::load_dir(cfg.unseen_pool, PoolRole::kUnseen, kUnseenIdBase);
  return p;
}

struct SyntheticPoolSizes {
  std::size_t targets = 10;
  std::size_t sources = 20;
  std::size_t unseen = 30;
};

inline Pools synthetic_pools(std::uint64_t seed, const SyntheticPoolSizes& n = {}, const SyntheticSpec& spec = {}) {
  const SeededRng rng = master_rng(seed).derive({tag(Phase::kPool)});
  Pools p;
  p.sources = synthetic_pool(n.sources, PoolRole::kSource, kSourceIdBase, rng.derive({0}), spec);
  p.targets = synthetic_pool(n.targets, PoolRole::kTarget, kTargetIdBase, rng.derive({1}), spec);
  p.unseen = synthetic_pool(n.unseen, PoolRole::kUnseen, kUnseenIdBase, rng.derive({2}), spec);
  return p;
}

// ---------------------------------------------------------------------------
// Proxy evaluation

struct ProxyRow {
  std::size_t target = 0;
  std::size_t step = 0;  // Stage-2 steps taken by the evaluated perturbation
  std::string split;     // seen | unseen
  std::string encoder;   // train<i> | heldout
  double similarity = 0.0;
  double baseline = 0.0;
  double delta = 0.0;
};

struct ProxyReport {
  std::vector<ProxyRow> rows;

  static constexpr const char* kHeader = "target,step,split,encoder,similarity,baseline,delta";

  std::string csv() const {
    std::ostringstream s;
    s << kHeader << "\n";
    for (const auto& r : rows)
      s << r.target << "," << r.step << "," << r.split << "," << r.encoder << "," << fmt(r.similarity) << ","
        << fmt(r.baseline) << "," << fmt(r.delta) << "\n";
    return s.str();
  }

  // Mean delta over targets for one (split, encoder); `step` selects a
  // snapshot, the default picks each target's largest step.
  double mean_delta(const std::string& split, const std::string& encoder,
                    std::size_t step = std::numeric_limits<std::size_t>::max()) const {
    std::map<std::size_t, std::size_t> last;
    for (const auto& r : rows) last[r.target] = std::max(last[r.target], r.step);
    double sum = 0.0;
    std::size_t n = 0;
    for (const auto& r : rows) {
      const std::size_t want = step == std::numeric_limits<std::size_t>::max() ? last[r.target] : step;
      if (r.split == split && r.encoder == encoder && r.step == want) {
        sum += r.delta;
        ++n;
      }
    }
    require(n > 0, ErrorCode::kInvalidArgument, "no report rows for " + split + "/" + encoder);
    return sum / static_cast<double>(n);
  }
};

struct NamedEncoder {
  std::string name;
  EncoderPtr encoder;
};

// Train encoders as train0.., then the held-out encoder.
inline std::vector<NamedEncoder> evaluation_encoders(const std::vector<EncoderPtr>& train, const EncoderPtr& heldout) {
  std::vector<NamedEncoder> out;
  for (std::size_t i = 0; i < train.size(); ++i) out.push_back({"train" + std::to_string(i), train[i]});
  out.push_back({"heldout", heldout});
  return out;
}

inline constexpr std::size_t kEvalCrops = 4;

// Target reference for the proxy: mean global feature over the full frame and
// kEvalCrops random crops. Independent of the run's toggles so arms compare.
inline DenseTensor eval_reference(const Encoder& enc, const DenseTensor& target, const CropSettings& cs,
                                  SeededRng rng) {
  const std::size_t side = enc.dims().image_size;
  std::vector<DenseTensor> globals;
  globals.push_back(enc.forward(crop_resize(target, CropSpec::full(target.dim(0), target.dim(1)), side, side)).global_feat);
  for (std::size_t c = 0; c < kEvalCrops; ++c) globals.push_back(enc.forward(random_crop(target, rng, cs).image).global_feat);
  return mean_of(globals);
}

struct EvalSource {
  const DenseTensor* image;
  std::uint64_t id;
};

// Similarity of global(clip(x + delta)) to the target reference, against the
// delta = 0 baseline, averaged over each split's sources.
inline std::vector<ProxyRow> proxy_eval(const Perturbation& delta, std::size_t target_index, const DenseTensor& target,
                                        const std::vector<EvalSource>& seen, const std::vector<EvalSource>& unseen,
                                        const std::vector<NamedEncoder>& encoders, const CropSettings& cs,
                                        const SeededRng& eval_rng, std::size_t step) {
  require(delta.within_budget(), ErrorCode::kBudgetViolation, "evaluated perturbation exceeds the budget");
  std::set<std::uint64_t> seen_ids;
  for (const auto& s : seen) seen_ids.insert(s.id);
  for (const auto& s : unseen)
    require(!seen_ids.count(s.id), ErrorCode::kInvalidArgument,
            "source id " + std::to_string(s.id) + " is in both the seen and unseen splits");
  std::vector<ProxyRow> rows;
  for (std::size_t e = 0; e < encoders.size(); ++e) {
    const Encoder& enc = *encoders[e].encoder;
    const std::size_t side = enc.dims().image_size;
    const DenseTensor ref = eval_reference(enc, target, cs, eval_rng.derive({0xE0, e}));
    for (const auto* split : {&seen, &unseen}) {
      if (split->empty()) continue;
      ProxyRow r;
      r.target = target_index;
      r.step = step;
      r.split = split == &seen ? "seen" : "unseen";
      r.encoder = encoders[e].name;
      for (const auto& s : *split) {
        const CropSpec full = CropSpec::full(s.image->dim(0), s.image->dim(1));
        DenseTensor adv = *s.image;
        adv += delta.delta;
        adv = clip_pixels(std::move(adv));
        const DenseTensor clean = clip_pixels(*s.image);
        r.similarity += cosine(enc.forward(crop_resize(adv, full, side, side)).global_feat.data(), ref.data());
        r.baseline += cosine(enc.forward(crop_resize(clean, full, side, side)).global_feat.data(), ref.data());
      }
      const double inv = 1.0 / static_cast<double>(split->size());
      r.similarity *= inv;
      r.baseline *= inv;
      r.delta = r.similarity - r.baseline;
      rows.push_back(std::move(r));
    }
  }
  return rows;
}

// ---------------------------------------------------------------------------
// CSV for traces

inline std::string trace_header(std::size_t encoders, bool with_epoch) {
  std::ostringstream s;
  if (with_epoch) s << "epoch,";
  s << "step,task_id,total";
  for (std::size_t e = 0; e < encoders; ++e) s << ",tr" << e;
  for (std::size_t e = 0; e < encoders; ++e) s << ",coa" << e;
  for (std::size_t e = 0; e < encoders; ++e) s << ",weight" << e;
  s << ",grad_l2,mean_gate";
  return s.str();
}

inline std::string trace_line(const TraceRow& r, std::optional<std::size_t> epoch) {
  std::ostringstream s;
  if (epoch) s << *epoch << ",";
  s << r.step << "," << r.task_id << "," << fmt(r.total);
  for (double v : r.tr) s << "," << fmt(v);
  for (double v : r.coa) s << "," << fmt(v);
  for (double v : r.weights) s << "," << fmt(v);
  s << "," << fmt(r.grad_l2) << "," << fmt(r.mean_gate);
  return s.str();
}

inline constexpr const char* kEpochHeader = "epoch,tasks,mean_task_loss,delta0_linf,delta0_shift_l2";

inline std::string epoch_line(const EpochMetrics& m) {
  std::ostringstream s;
  s << m.epoch << ",";
  for (std::size_t i = 0; i < m.tasks.size(); ++i) s << (i ? ";" : "") << m.tasks[i];
  s << "," << fmt(m.mean_task_loss) << "," << fmt(m.delta0_linf) << "," << fmt(m.delta0_shift_l2);
  return s.str();
}

// Keeps the header and the rows whose leading epoch column is < keep_epochs.
inline std::string truncate_epoch_csv(const std::string& text, std::size_t keep_epochs) {
  std::istringstream in(text);
  std::ostringstream out;
  std::string line;
  bool header = true;
  while (std::getline(in, line)) {
    if (header) {
      out << line << "\n";
      header = false;
      continue;
    }
    if (line.empty()) continue;
    if (std::stoull(line.substr(0, line.find(','))) < keep_epochs) out << line << "\n";
  }
  return out.str();
}

// ---------------------------------------------------------------------------
// Experiment context and stages

struct Context {
  RunConfig cfg;  // effective (toggles applied)
  RunConfig raw;
  const Pools* pools = nullptr;
  std::vector<EncoderPtr> ensemble;
  EncoderPtr heldout;
  SeededRng master;
  AttackProblem problem;
};

inline Context make_context(const RunConfig& raw, const Pools& pools) {
  raw.validate();
  Context ctx{raw.effective(), raw, &pools, {}, {}, master_rng(raw.seed), {}};
  pools.validate(raw.dims);
  require(pools.targets.images.front().dim(0) >= raw.dims.patch && pools.targets.images.front().dim(1) >= raw.dims.patch,
          ErrorCode::kImageTooSmall, "pool images are smaller than one patch");
  ctx.ensemble = make_ensemble(raw.train_encoder_seeds, raw.dims, raw.encoder_kind);
  ctx.heldout = EncoderRegistry::instance().create(raw.encoder_kind, raw.heldout_encoder_seed, raw.dims);
  ctx.problem.sources = &pools.sources;
  ctx.problem.targets = &pools.targets;
  ctx.problem.ensemble = ctx.ensemble;
  ctx.problem.settings = raw.attack_settings();
  return ctx;
}

inline fs::path bank_path(const fs::path& dir, std::size_t target) {
  char name[32];
  std::snprintf(name, sizeof(name), "target_%04zu.ubk", target);
  return dir / name;
}

inline TargetBank build_target_bank(const Context& ctx, std::size_t target) {
  return build_bank(ctx.pools->targets.images[target], ctx.ensemble, ctx.raw.bank_settings(),
                    ctx.master.derive({tag(Phase::kBank), target}));
}

// Builds every target's bank, or loads it from `dir` when a file exists there
// (a stale file raises VersionMismatch). New banks are written to `dir`.
inline void prepare_banks(Context& ctx, const std::optional<fs::path>& dir) {
  ctx.problem.banks.clear();
  if (!ctx.raw.uses_banks()) return;
  const Digest want = ctx.raw.bank_settings().digest();
  for (std::size_t t = 0; t < ctx.pools->targets.size(); ++t) {
    std::shared_ptr<const TargetBank> bank;
    if (dir && fs::exists(bank_path(*dir, t))) {
      bank = std::make_shared<const TargetBank>(TargetBank::load(bank_path(*dir, t), &want));
    } else {
      bank = std::make_shared<const TargetBank>(build_target_bank(ctx, t));
      if (dir) {
        fs::create_directories(*dir);
        bank->save(bank_path(*dir, t));
      }
    }
    ctx.problem.banks.push_back(std::move(bank));
  }
}

struct RunOptions {
  std::optional<fs::path> out_dir;   // artifacts are written only when set
  std::optional<fs::path> bank_dir;  // bank cache
  bool resume = true;
  std::optional<Perturbation> delta0;  // skip Stage-1 and start from this
  std::function<void(const std::string&)> log;
};

struct ExperimentResult {
  Perturbation delta0;
  std::vector<Perturbation> deltas;  // per target, after adapt_steps
  std::vector<std::vector<std::size_t>> seen_sources;
  std::vector<EpochMetrics> epochs;
  ProxyReport report;
  std::uint64_t updates = 0;
  std::uint64_t violations = 0;
  std::map<std::string, std::string> outputs;  // relative path -> content hash
};

inline std::string config_digest(const RunConfig& c) { return to_hex(sha256(to_json(c).dump())); }

inline Perturbation run_stage1(const Context& ctx, const RunOptions& opt, BudgetAudit& audit,
                               std::vector<EpochMetrics>* epochs) {
  Perturbation delta0 = Perturbation::zeros(ctx.pools->targets.images.front().shape(), ctx.cfg.meta.eps);
  Stage1Hooks hooks;
  hooks.audit = &audit;
  std::optional<fs::path> dir = opt.out_dir;
  const std::string digest = config_digest(ctx.raw);
  std::size_t ntask_enc = ctx.ensemble.size();
  if (dir) {
    const fs::path state = *dir / "stage1_state.json";
    bool resumed = false;
    if (opt.resume && fs::exists(state) && fs::exists(*dir / "delta0.ntf")) {
      const auto j = nlohmann::json::parse(read_text(state));
      if (j.value("config_digest", std::string()) == digest) {
        hooks.start_epoch = j.at("epochs_done").get<std::size_t>();
        delta0.delta = read_ntf(*dir / "delta0.ntf");
        require(delta0.within_budget(), ErrorCode::kBudgetViolation, "checkpointed delta0 exceeds the budget");
        write_text(*dir / "stage1_epochs.csv",
                   fs::exists(*dir / "stage1_epochs.csv")
                       ? truncate_epoch_csv(read_text(*dir / "stage1_epochs.csv"), hooks.start_epoch)
                       : std::string(kEpochHeader) + "\n");
        write_text(*dir / "stage1_trace.csv",
                   fs::exists(*dir / "stage1_trace.csv")
                       ? truncate_epoch_csv(read_text(*dir / "stage1_trace.csv"), hooks.start_epoch)
                       : trace_header(ntask_enc, true) + "\n");
        resumed = true;
        if (opt.log) opt.log("stage1: resuming after epoch " + std::to_string(hooks.start_epoch));
      }
    }
    if (!resumed) {
      write_text(*dir / "stage1_epochs.csv", std::string(kEpochHeader) + "\n");
      write_text(*dir / "stage1_trace.csv", trace_header(ntask_enc, true) + "\n");
    }
  }
  hooks.on_epoch = [&](const EpochMetrics& m, const Perturbation& d, const std::vector<TraceRow>& rows) {
    if (epochs) epochs->push_back(m);
    if (opt.log)
      opt.log("stage1 epoch " + std::to_string(m.epoch + 1) + "/" + std::to_string(ctx.cfg.meta.meta_epochs) +
              " loss " + fmt(m.mean_task_loss));
    if (!dir) return;
    {
      std::ofstream f(*dir / "stage1_epochs.csv", std::ios::app | std::ios::binary);
      f << epoch_line(m) << "\n";
      std::ofstream t(*dir / "stage1_trace.csv", std::ios::app | std::ios::binary);
      for (const auto& r : rows) t << trace_line(r, m.epoch) << "\n";
    }
    write_ntf(d.delta, *dir / "delta0.ntf");
    nlohmann::ordered_json j;
    j["config_digest"] = digest;
    j["epochs_done"] = m.epoch + 1;
    write_text(*dir / "stage1_state.json", j.dump(2) + "\n");
  };
  return stage1_meta_train(ctx.cfg.meta, ctx.problem, std::move(delta0), ctx.master, hooks);
}

inline fs::path delta_path(const fs::path& dir, std::size_t target, std::optional<std::size_t> step = {}) {
  char name[48];
  if (step)
    std::snprintf(name, sizeof(name), "target_%04zu_step_%04zu.ntf", target, *step);
  else
    std::snprintf(name, sizeof(name), "target_%04zu.ntf", target);
  return dir / "deltas" / name;
}

inline std::vector<EvalSource> seen_split(const Context& ctx, const std::vector<std::size_t>& indices) {
  std::vector<EvalSource> out;
  for (auto i : indices) out.push_back({&ctx.pools->sources.images[i], ctx.pools->sources.ids[i]});
  return out;
}

inline std::vector<EvalSource> unseen_split(const Context& ctx) {
  std::vector<EvalSource> out;
  for (std::size_t i = 0; i < ctx.pools->unseen.size(); ++i)
    out.push_back({&ctx.pools->unseen.images[i], ctx.pools->unseen.ids[i]});
  return out;
}

// The Stage-2 support set of a target, re-derived from its stream.
inline std::vector<std::size_t> stage2_sources(const Context& ctx, std::size_t target) {
  SeededRng src_rng = ctx.master.derive({tag(Phase::kStage2), target}).derive({0x50});
  return sample_source_indices(ctx.pools->sources.size(), ctx.cfg.meta.sources_per_task, src_rng);
}

inline std::map<std::string, std::string> hash_outputs(const fs::path& dir) {
  std::map<std::string, std::string> out;
  if (!fs::exists(dir)) return out;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    const auto rel = fs::relative(e.path(), dir).generic_string();
    if (rel == "manifest.json") continue;
    out[rel] = file_content_hash(e.path());
  }
  return out;
}

inline void write_manifest(const Context& ctx, const fs::path& dir, const std::string& command,
                           std::uint64_t updates, std::uint64_t violations) {
  nlohmann::ordered_json j;
  j["format"] = "uap-run-1";
  j["command"] = command;
  j["seed"] = ctx.raw.seed;
  j["config"] = to_json(ctx.raw);
  j["config_digest"] = config_digest(ctx.raw);
  j["budget"] = {{"updates", updates}, {"violations", violations}};
  nlohmann::ordered_json files = nlohmann::ordered_json::object();
  for (const auto& [k, v] : hash_outputs(dir)) files[k] = v;
  j["outputs"] = files;
  write_text(dir / "manifest.json", j.dump(2) + "\n");
}

// Stage-2 for every target (parallel over targets), then proxy evaluation of
// the final perturbation and of every snapshot.
inline void run_stage2_and_eval(const Context& ctx, const Perturbation& delta0, const RunOptions& opt,
                                BudgetAudit& audit, ExperimentResult& res) {
  const std::size_t T = ctx.pools->targets.size();
  std::vector<Stage2Result> results(T);
  parallel_for(T, [&](std::size_t t) {
    results[t] = stage2_adapt(delta0, t, ctx.cfg.meta, ctx.problem, ctx.master, ctx.cfg.snapshot_steps, &audit);
    if (opt.log) opt.log("stage2 target " + std::to_string(t) + " done");
  });
  const auto encoders = evaluation_encoders(ctx.ensemble, ctx.heldout);
  const auto unseen = unseen_split(ctx);
  std::vector<std::vector<ProxyRow>> rows(T);
  parallel_for(T, [&](std::size_t t) {
    const auto seen = seen_split(ctx, results[t].seen_sources);
    const SeededRng er = ctx.master.derive({tag(Phase::kEval), t});
    for (const auto& [step, snap] : results[t].snapshots) {
      if (step == ctx.cfg.meta.adapt_steps) continue;
      auto r = proxy_eval(snap, t, ctx.pools->targets.images[t], seen, unseen, encoders, ctx.cfg.crop_settings(), er,
                          step);
      rows[t].insert(rows[t].end(), r.begin(), r.end());
    }
    auto r = proxy_eval(results[t].delta, t, ctx.pools->targets.images[t], seen, unseen, encoders,
                        ctx.cfg.crop_settings(), er, ctx.cfg.meta.adapt_steps);
    rows[t].insert(rows[t].end(), r.begin(), r.end());
  });
  for (std::size_t t = 0; t < T; ++t) {
    res.report.rows.insert(res.report.rows.end(), rows[t].begin(), rows[t].end());
    res.deltas.push_back(results[t].delta);
    res.seen_sources.push_back(results[t].seen_sources);
  }
  if (!opt.out_dir) return;
  const fs::path& dir = *opt.out_dir;
  std::ostringstream trace, seen;
  trace << trace_header(ctx.ensemble.size(), false) << "\n";
  seen << "target,source_index,source_id\n";
  for (std::size_t t = 0; t < T; ++t) {
    fs::create_directories(dir / "deltas");
    write_ntf(results[t].delta.delta, delta_path(dir, t));
    for (const auto& [step, snap] : results[t].snapshots)
      if (step != ctx.cfg.meta.adapt_steps) write_ntf(snap.delta, delta_path(dir, t, step));
    for (const auto& r : results[t].trace) trace << trace_line(r, std::nullopt) << "\n";
    for (auto i : results[t].seen_sources) seen << t << "," << i << "," << ctx.pools->sources.ids[i] << "\n";
  }
  write_text(dir / "stage2_trace.csv", trace.str());
  write_text(dir / "seen_sources.csv", seen.str());
  write_text(dir / "proxy_report.csv", res.report.csv());
}

// Stage-1 (when meta_init is on and no delta0 is supplied), Stage-2 for every
// target, proxy evaluation, and the artifacts under opt.out_dir.
inline ExperimentResult run_experiment(const RunConfig& cfg, const Pools& pools, const RunOptions& opt = {}) {
  Context ctx = make_context(cfg, pools);
  BudgetAudit audit;
  ExperimentResult res;
  if (opt.out_dir) fs::create_directories(*opt.out_dir);
  prepare_banks(ctx, opt.bank_dir);
  if (opt.delta0) {
    res.delta0 = *opt.delta0;
    require(res.delta0.delta.shape() == pools.targets.images.front().shape(), ErrorCode::kShapeMismatch,
            "delta0 shape differs from the pool images");
    require(res.delta0.eps == cfg.meta.eps && res.delta0.within_budget(), ErrorCode::kBudgetViolation,
            "delta0 is outside the configured budget");
  } else if (cfg.toggles.meta_init) {
    res.delta0 = run_stage1(ctx, opt, audit, &res.epochs);
  } else {
    res.delta0 = Perturbation::zeros(pools.targets.images.front().shape(), cfg.meta.eps);
  }
  if (opt.out_dir && !opt.delta0) write_ntf(res.delta0.delta, *opt.out_dir / "delta0.ntf");
  run_stage2_and_eval(ctx, res.delta0, opt, audit, res);
  res.updates = audit.updates.load();
  res.violations = audit.violations.load();
  if (opt.out_dir) {
    write_manifest(ctx, *opt.out_dir, "run", res.updates, res.violations);
    res.outputs = hash_outputs(*opt.out_dir);
  }
  return res;
}

// Stage-1 only; writes delta0.ntf, the Stage-1 CSVs and a manifest.
inline Perturbation run_meta_train(const RunConfig& cfg, const Pools& pools, const RunOptions& opt = {}) {
  Context ctx = make_context(cfg, pools);
  BudgetAudit audit;
  if (opt.out_dir) fs::create_directories(*opt.out_dir);
  prepare_banks(ctx, opt.bank_dir);
  Perturbation d = run_stage1(ctx, opt, audit, nullptr);
  if (opt.out_dir) {
    write_ntf(d.delta, *opt.out_dir / "delta0.ntf");
    write_manifest(ctx, *opt.out_dir, "meta-train", audit.updates.load(), audit.violations.load());
  }
  return d;
}

// Proxy evaluation of perturbations already on disk (deltas/target_XXXX.ntf).
inline ProxyReport evaluate_saved(const RunConfig& cfg, const Pools& pools, const fs::path& run_dir) {
  Context ctx = make_context(cfg, pools);
  const auto encoders = evaluation_encoders(ctx.ensemble, ctx.heldout);
  const auto unseen = unseen_split(ctx);
  ProxyReport report;
  for (std::size_t t = 0; t < pools.targets.size(); ++t) {
    const Perturbation d{read_ntf(delta_path(run_dir, t)), cfg.meta.eps};
    const auto seen = seen_split(ctx, stage2_sources(ctx, t));
    auto rows = proxy_eval(d, t, pools.targets.images[t], seen, unseen, encoders, cfg.crop_settings(),
                           ctx.master.derive({tag(Phase::kEval), t}), cfg.meta.adapt_steps);
    report.rows.insert(report.rows.end(), rows.begin(), rows.end());
  }
  return report;
}

// ---------------------------------------------------------------------------
// Crop-variance studies

// Gradient of the alignment loss against `crops` target crops (features per
// crop from their own streams), with a fixed full-frame source crop and a
// uniform ensemble weighting.
inline DenseTensor crop_set_gradient(const Context& ctx, const DenseTensor& target, const DenseTensor& source,
                                     const DenseTensor& delta, const std::vector<CropSpec>& crops,
                                     const std::function<SeededRng(const CropSpec&, std::size_t)>& crop_rng) {
  const std::size_t side = ctx.cfg.dims.image_size;
  TargetSet ts;
  ts.per_encoder.resize(ctx.ensemble.size());
  for (std::size_t c = 0; c < crops.size(); ++c) {
    const DenseTensor img = crop_resize(target, crops[c], side, side);
    for (std::size_t e = 0; e < ctx.ensemble.size(); ++e)
      ts.per_encoder[e].push_back(crop_features(*ctx.ensemble[e], img, ctx.cfg.clusters, crop_rng(crops[c], c).derive({e})));
  }
  const auto lb = total_loss_and_grad(delta, source, CropSpec::full(source.dim(0), source.dim(1)), ts, ctx.ensemble,
                                      EnsembleState::uniform(ctx.ensemble.size()), ctx.problem.settings.align);
  return lb.grad;
}

struct VarianceRow {
  std::size_t m = 0;
  double grad_mean = 0.0;  // mean over coordinates of the estimator mean
  double grad_var = 0.0;   // mean over coordinates of the estimator variance
};

struct VarianceStudy {
  std::vector<VarianceRow> rows;
  // Least-squares slope of log(var) against log(m), negated: 1 for a 1/m law.
  // NaN with fewer than two m values.
  double decay = std::numeric_limits<double>::quiet_NaN();

  std::string csv() const {
    std::ostringstream s;
    s << "m,grad_mean,grad_var\n";
    for (const auto& r : rows) s << r.m << "," << fmt(r.grad_mean) << "," << fmt(r.grad_var) << "\n";
    return s.str();
  }
};

inline double loglog_decay(const std::vector<VarianceRow>& rows) {
  if (rows.size() < 2) return std::numeric_limits<double>::quiet_NaN();
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (const auto& r : rows) {
    const double x = std::log(static_cast<double>(r.m)), y = std::log(r.grad_var);
    sx += x;
    sy += y;
    sxx += x * x;
    sxy += x * y;
  }
  const double n = static_cast<double>(rows.size());
  return -(n * sxy - sx * sy) / (n * sxx - sx * sx);
}

// For each m: `resamples` independent estimates, each the gradient against m
// fresh i.i.d. random target crops; delta and the source crop stay fixed.
inline VarianceStudy variance_study(const RunConfig& cfg, const Pools& pools, std::size_t target_index,
                                    std::size_t source_index, const DenseTensor& delta,
                                    const std::vector<std::size_t>& m_list, std::size_t resamples) {
  require(!m_list.empty() && resamples >= 2, ErrorCode::kInvalidArgument, "need m values and >= 2 resamples");
  Context ctx = make_context(cfg, pools);
  const DenseTensor& target = pools.targets.images.at(target_index);
  const DenseTensor& source = pools.sources.images.at(source_index);
  const SeededRng study = ctx.master.derive({tag(Phase::kStudy), target_index, source_index});
  VarianceStudy out;
  for (std::size_t mi = 0; mi < m_list.size(); ++mi) {
    const std::size_t m = m_list[mi];
    require(m >= 1, ErrorCode::kInvalidArgument, "m must be >= 1");
    std::vector<DenseTensor> est(resamples);
    parallel_for(resamples, [&](std::size_t r) {
      SeededRng rr = study.derive({m, r});
      std::vector<CropSpec> crops;
      for (std::size_t c = 0; c < m; ++c)
        crops.push_back(random_crop_spec(target.dim(0), target.dim(1), rr, ctx.cfg.crop_settings()));
      est[r] = crop_set_gradient(ctx, target, source, delta, crops,
                                 [&](const CropSpec&, std::size_t c) { return study.derive({m, r, 0xF0, c}); });
    });
    const DenseTensor mean = mean_of(est);
    double var = 0.0;
    for (std::size_t i = 0; i < mean.size(); ++i) {
      double s = 0.0;
      for (const auto& g : est) s += (g[i] - mean[i]) * (g[i] - mean[i]);
      var += s / static_cast<double>(resamples - 1);
    }
    out.rows.push_back({m, mean.sum() / static_cast<double>(mean.size()), var / static_cast<double>(mean.size())});
  }
  out.decay = loglog_decay(out.rows);
  return out;
}

// Crops at each scale on an offset lattice of the given stride (last offset
// always included), scales in the given order.
inline std::vector<CropSpec> enumerate_crop_grid(std::size_t H, std::size_t W, const std::vector<double>& scales,
                                                 std::size_t stride, std::size_t min_side) {
  require(stride >= 1, ErrorCode::kInvalidArgument, "stride must be >= 1");
  std::vector<CropSpec> grid;
  for (double s : scales) {
    const CropSpec c = crop_geometry(H, W, s, 0.0, 0.0, min_side);
    auto offsets = [&](std::size_t range) {
      std::vector<std::size_t> v;
      for (std::size_t o = 0; o <= range; o += stride) v.push_back(o);
      if (v.back() != range) v.push_back(range);
      return v;
    };
    for (auto y : offsets(H - c.h))
      for (auto x : offsets(W - c.w)) grid.push_back({x, y, c.w, c.h});
  }
  return grid;
}

struct UnbiasednessResult {
  std::size_t grid_size = 0;
  std::size_t m = 0;
  std::size_t draws = 0;
  double exhaustive = 0.0;      // grid average of the per-crop value
  double estimator_mean = 0.0;  // mean of the m-crop estimates
  double standard_error = 0.0;

  double z() const { return (estimator_mean - exhaustive) / standard_error; }
};

// Per-crop value: the loss gradient projected on a fixed random unit
// direction. Crop features come from a stream keyed by the crop geometry, so
// the value is a function of the crop alone.
inline UnbiasednessResult unbiasedness_check(const RunConfig& cfg, const Pools& pools, std::size_t target_index,
                                             std::size_t source_index, const DenseTensor& delta,
                                             const std::vector<CropSpec>& grid, std::size_t m, std::size_t draws) {
  require(!grid.empty() && m >= 1 && draws >= 2, ErrorCode::kInvalidArgument, "bad unbiasedness setup");
  Context ctx = make_context(cfg, pools);
  const DenseTensor& target = pools.targets.images.at(target_index);
  const DenseTensor& source = pools.sources.images.at(source_index);
  const SeededRng study = ctx.master.derive({tag(Phase::kStudy), 0xB1A5, target_index, source_index});
  DenseTensor dir(delta.shape());
  {
    SeededRng r = study.derive({0xD1});
    for (double& v : dir.data()) v = r.uniform(-1.0, 1.0);
    dir *= 1.0 / dir.l2_norm();
  }
  auto keyed = [&](const CropSpec& c, std::size_t) { return study.derive({0xC0, c.x0, c.y0, c.w, c.h}); };
  std::vector<double> value(grid.size());
  parallel_for(grid.size(), [&](std::size_t i) {
    value[i] = dot(crop_set_gradient(ctx, target, source, delta, {grid[i]}, keyed).data(), dir.data());
  });
  UnbiasednessResult out;
  out.grid_size = grid.size();
  out.m = m;
  out.draws = draws;
  for (double v : value) out.exhaustive += v / static_cast<double>(grid.size());
  SeededRng pick = study.derive({0xD2, m});
  std::vector<double> est(draws);
  for (auto& e : est) {
    double s = 0.0;
    for (std::size_t c = 0; c < m; ++c) s += value[pick.below(grid.size())];
    e = s / static_cast<double>(m);
  }
  double mean = 0.0;
  for (double e : est) mean += e / static_cast<double>(draws);
  double var = 0.0;
  for (double e : est) var += (e - mean) * (e - mean) / static_cast<double>(draws - 1);
  out.estimator_mean = mean;
  out.standard_error = std::sqrt(var / static_cast<double>(draws));
  return out;
}

// ---------------------------------------------------------------------------
// Ablations

struct AblationRow {
  std::string table;
  std::string arm;
  std::uint64_t seed = 0;
  std::size_t step = 0;
  double seen_train = 0.0;  // mean over train encoders
  double seen_heldout = 0.0;
  double unseen_train = 0.0;
  double unseen_heldout = 0.0;
};

inline constexpr const char* kAblationHeader =
    "table,arm,seed,step,seen_train,seen_heldout,unseen_train,unseen_heldout";

inline std::string ablation_csv(const std::vector<AblationRow>& rows) {
  std::ostringstream s;
  s << kAblationHeader << "\n";
  for (const auto& r : rows)
    s << r.table << "," << r.arm << "," << r.seed << "," << r.step << "," << fmt(r.seen_train) << ","
      << fmt(r.seen_heldout) << "," << fmt(r.unseen_train) << "," << fmt(r.unseen_heldout) << "\n";
  return s.str();
}

inline AblationRow summarize(const ProxyReport& rep, std::size_t encoders, const std::string& table,
                             const std::string& arm, std::uint64_t seed, std::size_t step) {
  AblationRow r{table, arm, seed, step};
  for (std::size_t e = 0; e < encoders; ++e) {
    r.seen_train += rep.mean_delta("seen", "train" + std::to_string(e), step) / static_cast<double>(encoders);
    r.unseen_train += rep.mean_delta("unseen", "train" + std::to_string(e), step) / static_cast<double>(encoders);
  }
  r.seen_heldout = rep.mean_delta("seen", "heldout", step);
  r.unseen_heldout = rep.mean_delta("unseen", "heldout", step);
  return r;
}

struct Arm {
  std::string name;
  Toggles toggles;
};

// Component grid; meta_init follows the base config.
inline std::vector<Arm> table3_arms(bool meta_init) {
  return {{"baseline", {false, false, false, meta_init}},
          {"mca", {true, false, false, meta_init}},
          {"tr", {false, false, true, meta_init}},
          {"mca_agc", {true, true, false, meta_init}},
          {"full", {true, true, true, meta_init}}};
}

inline const std::vector<std::size_t> kTable2N = {2, 5, 10, 20};
inline const std::vector<std::size_t> kTable4M = {2, 4, 8, 16};
inline const std::vector<std::size_t> kTable5Steps = {50, 100, 200, 300};

using PoolFactory = std::function<Pools(std::uint64_t seed)>;

inline std::vector<AblationRow> run_table3(const RunConfig& base, const std::vector<std::uint64_t>& seeds,
                                           const PoolFactory& pools) {
  std::vector<AblationRow> rows;
  for (auto seed : seeds) {
    const Pools p = pools(seed);
    for (const auto& arm : table3_arms(base.toggles.meta_init)) {
      RunConfig c = base;
      c.seed = seed;
      c.toggles = arm.toggles;
      const auto res = run_experiment(c, p);
      rows.push_back(summarize(res.report, c.train_encoder_seeds.size(), "table3", arm.name, seed, c.meta.adapt_steps));
    }
  }
  return rows;
}

inline std::vector<AblationRow> run_table4(const RunConfig& base, const std::vector<std::uint64_t>& seeds,
                                           const PoolFactory& pools) {
  std::vector<AblationRow> rows;
  for (auto seed : seeds) {
    const Pools p = pools(seed);
    for (auto m : kTable4M) {
      RunConfig c = base;
      c.seed = seed;
      c.meta.crops = m;
      const auto res = run_experiment(c, p);
      rows.push_back(summarize(res.report, c.train_encoder_seeds.size(), "table4", "m=" + std::to_string(m), seed,
                               c.meta.adapt_steps));
    }
  }
  return rows;
}

// Meta-initialized versus zero-initialized Stage-2, evaluated at `steps`
// (one Stage-2 run per arm with snapshots).
inline std::vector<AblationRow> run_table5(const RunConfig& base, const std::vector<std::uint64_t>& seeds,
                                           const PoolFactory& pools, const std::vector<std::size_t>& steps = kTable5Steps) {
  std::vector<AblationRow> rows;
  for (auto seed : seeds) {
    const Pools p = pools(seed);
    for (bool meta : {true, false}) {
      RunConfig c = base;
      c.seed = seed;
      c.toggles.meta_init = meta;
      c.meta.adapt_steps = *std::max_element(steps.begin(), steps.end());
      c.snapshot_steps = steps;
      const auto res = run_experiment(c, p);
      for (auto s : steps)
        rows.push_back(summarize(res.report, c.train_encoder_seeds.size(), "table5", meta ? "meta" : "zero", seed, s));
    }
  }
  return rows;
}

inline std::vector<AblationRow> run_table2(const RunConfig& base, const std::vector<std::uint64_t>& seeds,
                                           const PoolFactory& pools, const std::vector<std::size_t>& ns = kTable2N) {
  std::vector<AblationRow> rows;
  for (auto seed : seeds) {
    const Pools p = pools(seed);
    for (auto n : ns) {
      RunConfig c = base;
      c.seed = seed;
      c.meta.sources_per_task = n;
      const auto res = run_experiment(c, p);
      rows.push_back(summarize(res.report, c.train_encoder_seeds.size(), "table2", "N=" + std::to_string(n), seed,
                               c.meta.adapt_steps));
    }
  }
  return rows;
}

// Runs every table and writes table2.csv .. table5.csv into out_dir.
inline std::map<std::string, std::vector<AblationRow>> ablation_suite(const RunConfig& base,
                                                                      const std::vector<std::uint64_t>& seeds,
                                                                      const PoolFactory& pools,
                                                                      const std::optional<fs::path>& out_dir,
                                                                      const std::set<std::string>& tables = {
                                                                          "table2", "table3", "table4", "table5"}) {
  std::map<std::string, std::vector<AblationRow>> out;
  if (tables.count("table2")) out["table2"] = run_table2(base, seeds, pools);
  if (tables.count("table3")) out["table3"] = run_table3(base, seeds, pools);
  if (tables.count("table4")) out["table4"] = run_table4(base, seeds, pools);
  if (tables.count("table5")) out["table5"] = run_table5(base, seeds, pools);
  if (out_dir)
    for (const auto& [name, rows] : out) write_text(*out_dir / (name + ".csv"), ablation_csv(rows));
  return out;
}

}  // namespace uap
