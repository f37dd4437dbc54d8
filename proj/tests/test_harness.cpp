// Copyright (c) 2026 The uap Authors
// SPDX-License-Identifier: Apache-2.0

#include <chrono>

#include "test_util.hpp"

namespace uap {
namespace {

using testing::random_tensor;

// Tiny but complete run: 16 px images, 2 train encoders.
RunConfig tiny_config() {
  RunConfig c;
  c.dims = {16, 3, 4, 8};
  c.train_encoder_seeds = {101, 102};
  c.clusters = 2;
  c.meta.meta_epochs = 2;
  c.meta.task_batch = 2;
  c.meta.meta_inner_steps = 2;
  c.meta.sources_per_task = 2;
  c.meta.crops = 2;
  c.meta.adapt_steps = 4;
  return c;
}

Pools tiny_pools(std::uint64_t seed = 0) {
  SyntheticSpec spec;
  spec.side = 16;
  return synthetic_pools(seed, {3, 4, 3}, spec);
}

std::string first_line(const fs::path& p) {
  const std::string s = read_text(p);
  return s.substr(0, s.find('\n'));
}

TEST(Config, Defaults) {
  const RunConfig c;
  EXPECT_NO_THROW(c.validate());
  EXPECT_DOUBLE_EQ(c.meta.eps, 16.0 / 255.0);
  EXPECT_DOUBLE_EQ(c.meta.adapt_step_size, 1.0 / 255.0);
  EXPECT_DOUBLE_EQ(c.meta.meta_inner_step_size, 1.0 / 255.0);
  EXPECT_EQ(c.meta.sources_per_task, 20u);
  EXPECT_EQ(c.meta.crops, 4u);
  EXPECT_EQ(c.meta.adapt_steps, 300u);
  EXPECT_DOUBLE_EQ(c.routing.sharpness, 0.2);
  EXPECT_DOUBLE_EQ(c.sinkhorn.reg, 0.05);
  EXPECT_EQ(c.sinkhorn.iters, 50u);
  EXPECT_EQ(c.ot_gradient, OtGradient::kStop);
  EXPECT_EQ(c.train_encoder_seeds.size(), 3u);
  EXPECT_EQ(c.dims, (EncoderDims{32, 3, 8, 16}));
  EXPECT_TRUE(c.toggles.mca && c.toggles.agc && c.toggles.tr && c.toggles.meta_init);
}

TEST(Config, JsonRoundTrip) {
  RunConfig c = tiny_config();
  c.ot_gradient = OtGradient::kUnrolled;
  c.toggles.agc = false;
  c.snapshot_steps = {2};
  const RunConfig back = config_from_json(nlohmann::json::parse(to_json(c).dump()));
  EXPECT_EQ(to_json(back).dump(), to_json(c).dump());
  EXPECT_EQ(to_json(config_from_json(nlohmann::json::object())).dump(), to_json(RunConfig{}).dump());
}

TEST(Config, Rejections) {
  auto bad = [](nlohmann::json j) { return testing::error_code_of([&] { config_from_json(j); }); };
  EXPECT_EQ(bad({{"adapt_stpes", 10}}), ErrorCode::kConfigInvalid);
  EXPECT_EQ(bad({{"ot_gradient", "maybe"}}), ErrorCode::kConfigInvalid);
  EXPECT_EQ(bad({{"crops", "four"}}), ErrorCode::kConfigInvalid);
  EXPECT_EQ(bad({{"train_encoder_seeds", {1, 1}}}), ErrorCode::kConfigInvalid);
  EXPECT_EQ(bad({{"heldout_encoder_seed", 101}}), ErrorCode::kConfigInvalid);
  EXPECT_EQ(bad({{"image_size", 30}}), ErrorCode::kConfigInvalid);
  EXPECT_EQ(bad({{"clusters", 17}}), ErrorCode::kConfigInvalid);
  EXPECT_EQ(bad({{"snapshot_steps", {400}}}), ErrorCode::kConfigInvalid);
  EXPECT_EQ(bad({{"crops", 0}, {"agc", false}}), ErrorCode::kConfigInvalid);
  EXPECT_EQ(bad({{"gate_sharpness", 0.0}}), ErrorCode::kConfigInvalid);
  EXPECT_EQ(bad(nlohmann::json::array()), ErrorCode::kConfigInvalid);
  EXPECT_UAP_ERROR(load_config("/nonexistent/config.json"), ErrorCode::kIoError);
  testing::TempDir dir("cfg");
  write_text(dir / "c.json", "{ not json");
  EXPECT_UAP_ERROR(load_config(dir / "c.json"), ErrorCode::kConfigInvalid);
}

TEST(Config, TogglesOffIsTheBaselineArm) {
  RunConfig c;
  c.toggles = {false, false, false, false};
  const RunConfig e = c.effective();
  EXPECT_EQ(e.meta.crops, 0u);
  EXPECT_LE(e.routing.gamma, -1e6);
  EXPECT_EQ(e.routing.lambda_pre, 0.0);
  EXPECT_TRUE(c.attack_settings().resample_target_crops);
  EXPECT_FALSE(c.uses_banks());
  EXPECT_FALSE(c.bank_settings().attention_crop);
}

TEST(Sweeps, CoverTheGrids) {
  EXPECT_EQ(kTable4M, (std::vector<std::size_t>{2, 4, 8, 16}));
  EXPECT_EQ(kTable5Steps, (std::vector<std::size_t>{50, 100, 200, 300}));
  EXPECT_EQ(kTable2N, (std::vector<std::size_t>{2, 5, 10, 20}));
  const auto arms = table3_arms(false);
  ASSERT_EQ(arms.size(), 5u);
  EXPECT_EQ(arms.front().name, "baseline");
  EXPECT_FALSE(arms.front().toggles.mca || arms.front().toggles.agc || arms.front().toggles.tr);
  EXPECT_EQ(arms.back().name, "full");
  EXPECT_TRUE(arms.back().toggles.mca && arms.back().toggles.agc && arms.back().toggles.tr);
}

TEST(SyntheticPools, ShapesIdsAndDeterminism) {
  const Pools a = synthetic_pools(3), b = synthetic_pools(3), c = synthetic_pools(4);
  EXPECT_EQ(a.targets.size(), 10u);
  EXPECT_EQ(a.sources.size(), 20u);
  EXPECT_EQ(a.unseen.size(), 30u);
  EXPECT_NO_THROW(a.validate(EncoderDims{}));
  EXPECT_EQ(a.sources.images[5], b.sources.images[5]);
  EXPECT_NE(a.sources.images[5], c.sources.images[5]);
  for (double v : a.unseen.images[7].data()) {
    ASSERT_GE(v, 0.0);
    ASSERT_LE(v, 1.0);
  }
  std::set<std::uint64_t> ids(a.sources.ids.begin(), a.sources.ids.end());
  for (auto id : a.unseen.ids) EXPECT_FALSE(ids.count(id));
}

TEST(Pools, Validation) {
  Pools p = tiny_pools();
  EXPECT_UAP_ERROR(p.validate(EncoderDims{16, 1, 4, 8}), ErrorCode::kShapeMismatch);
  p.unseen.ids[0] = p.sources.ids[0];
  EXPECT_UAP_ERROR(p.validate(EncoderDims{16, 3, 4, 8}), ErrorCode::kInvalidArgument);
  RunConfig c;
  c.source_pool = "/nonexistent/src";
  EXPECT_UAP_ERROR(load_pools(c), ErrorCode::kMissingPool);
}

TEST(ProxyEval, ZeroPerturbationGivesZeroDelta) {
  const Pools p = tiny_pools();
  const auto ens = make_ensemble({1, 2}, EncoderDims{16, 3, 4, 8});
  const auto heldout = EncoderRegistry::instance().create("toy", 9, EncoderDims{16, 3, 4, 8});
  const std::vector<EvalSource> seen = {{&p.sources.images[0], p.sources.ids[0]}};
  const std::vector<EvalSource> unseen = {{&p.unseen.images[0], p.unseen.ids[0]}, {&p.unseen.images[1], p.unseen.ids[1]}};
  const auto rows = proxy_eval(Perturbation::zeros({16, 16, 3}, 0.1), 0, p.targets.images[0], seen, unseen,
                               evaluation_encoders(ens, heldout), CropSettings{0.5, 16, 4}, SeededRng(1, 1), 0);
  ASSERT_EQ(rows.size(), 3u * 2u);
  for (const auto& r : rows) EXPECT_EQ(r.delta, 0.0);
}

TEST(ProxyEval, SelfTargetCeiling) {
  const Pools p = tiny_pools();
  const auto ens = make_ensemble({1}, EncoderDims{16, 3, 4, 8});
  const auto heldout = EncoderRegistry::instance().create("toy", 9, EncoderDims{16, 3, 4, 8});
  const DenseTensor& target = p.targets.images[1];
  const std::vector<EvalSource> seen = {{&target, 77}};
  SeededRng rng(2, 0);
  const Perturbation d{random_tensor({16, 16, 3}, rng, -0.06, 0.06), 0.0627};
  const auto rows = proxy_eval(d, 1, target, seen, {}, evaluation_encoders(ens, heldout), CropSettings{0.5, 16, 4},
                               SeededRng(3, 3), 0);
  ASSERT_EQ(rows.size(), 2u);
  for (const auto& r : rows) {
    EXPECT_GT(r.baseline, 0.9);
    EXPECT_LE(r.delta, 1.0 - r.baseline + 1e-12);
  }
}

TEST(ProxyEval, SplitsMustBeDisjoint) {
  const Pools p = tiny_pools();
  const auto ens = make_ensemble({1}, EncoderDims{16, 3, 4, 8});
  const std::vector<EvalSource> seen = {{&p.sources.images[0], 5}};
  const std::vector<EvalSource> unseen = {{&p.unseen.images[0], 5}};
  EXPECT_UAP_ERROR(proxy_eval(Perturbation::zeros({16, 16, 3}, 0.1), 0, p.targets.images[0], seen, unseen,
                              evaluation_encoders(ens, ens[0]), CropSettings{0.5, 16, 4}, SeededRng(1, 1), 0),
                   ErrorCode::kInvalidArgument);
  EXPECT_UAP_ERROR(proxy_eval(Perturbation{DenseTensor({16, 16, 3}, 0.2), 0.1}, 0, p.targets.images[0], seen, {},
                              evaluation_encoders(ens, ens[0]), CropSettings{0.5, 16, 4}, SeededRng(1, 1), 0),
                   ErrorCode::kBudgetViolation);
}

TEST(ProxyReport, MeanDeltaUsesLastStep) {
  ProxyReport r;
  r.rows = {{0, 5, "unseen", "heldout", 0, 0, 1.0}, {0, 10, "unseen", "heldout", 0, 0, 3.0},
            {1, 10, "unseen", "heldout", 0, 0, 5.0}, {1, 10, "seen", "heldout", 0, 0, 7.0}};
  EXPECT_DOUBLE_EQ(r.mean_delta("unseen", "heldout"), 4.0);
  EXPECT_DOUBLE_EQ(r.mean_delta("unseen", "heldout", 5), 1.0);
  EXPECT_UAP_ERROR(r.mean_delta("unseen", "train0"), ErrorCode::kInvalidArgument);
  EXPECT_EQ(r.csv().substr(0, r.csv().find('\n')), "target,step,split,encoder,similarity,baseline,delta");
}

TEST(Experiment, SmokeRunEmitsArtifacts) {
  RunConfig c = tiny_config();
  c.dims = EncoderDims{};
  c.train_encoder_seeds = {101, 102, 103};
  c.clusters = 4;
  c.meta.sources_per_task = 2;
  c.meta.task_batch = 1;
  c.meta.adapt_steps = 5;
  const Pools p = synthetic_pools(1, {1, 2, 3});
  testing::TempDir dir("smoke");
  RunOptions o;
  o.out_dir = dir.path();
  o.bank_dir = dir / "banks";
  const auto t0 = std::chrono::steady_clock::now();
  const auto r = run_experiment(c, p, o);
  EXPECT_LT(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(), 10.0);
  EXPECT_EQ(r.violations, 0u);
  EXPECT_GT(r.updates, 0u);
  for (const char* f : {"delta0.ntf", "stage1_epochs.csv", "stage1_trace.csv", "stage1_state.json", "stage2_trace.csv",
                        "seen_sources.csv", "proxy_report.csv", "manifest.json", "deltas/target_0000.ntf",
                        "banks/target_0000.ubk"})
    EXPECT_TRUE(fs::exists(dir / f)) << f;
  EXPECT_EQ(first_line(dir / "proxy_report.csv"), ProxyReport::kHeader);
  EXPECT_EQ(first_line(dir / "stage1_epochs.csv"), kEpochHeader);
  EXPECT_EQ(first_line(dir / "stage2_trace.csv"), trace_header(3, false));
  EXPECT_EQ(first_line(dir / "stage1_trace.csv"), trace_header(3, true));
  EXPECT_EQ(first_line(dir / "seen_sources.csv"), "target,source_index,source_id");
  const auto m = nlohmann::json::parse(read_text(dir / "manifest.json"));
  EXPECT_EQ(m.at("format"), "uap-run-1");
  EXPECT_EQ(m.at("budget").at("violations"), 0);
  EXPECT_EQ(m.at("outputs").at("proxy_report.csv"), file_content_hash(dir / "proxy_report.csv"));
  EXPECT_FALSE(m.at("outputs").contains("manifest.json"));
  EXPECT_TRUE(read_ntf(dir / "deltas/target_0000.ntf").linf_norm() <= c.meta.eps);
}

TEST(Experiment, DeterministicOutputs) {
  const RunConfig c = tiny_config();
  const Pools p = tiny_pools();
  testing::TempDir a("det_a"), b("det_b");
  RunOptions oa, ob;
  oa.out_dir = a.path();
  ob.out_dir = b.path();
  const auto ra = run_experiment(c, p, oa);
  const auto rb = run_experiment(c, p, ob);
  EXPECT_EQ(ra.outputs, rb.outputs);
  EXPECT_EQ(read_text(a / "manifest.json"), read_text(b / "manifest.json"));
  EXPECT_EQ(ra.report.csv(), rb.report.csv());
  // Seen and unseen never overlap.
  for (const auto& seen : ra.seen_sources)
    for (auto i : seen)
      for (auto id : p.unseen.ids) EXPECT_NE(p.sources.ids[i], id);
}

TEST(Experiment, WorkerCountDoesNotChangeResults) {
  const RunConfig c = tiny_config();
  const Pools p = tiny_pools();
  ::setenv("UAP_WORKERS", "1", 1);
  const auto one = run_experiment(c, p);
  ::setenv("UAP_WORKERS", "3", 1);
  const auto three = run_experiment(c, p);
  ::unsetenv("UAP_WORKERS");
  EXPECT_EQ(one.report.csv(), three.report.csv());
  EXPECT_EQ(one.delta0.delta, three.delta0.delta);
}

TEST(Experiment, Stage1ResumesFromCheckpoint) {
  RunConfig c = tiny_config();
  c.meta.meta_epochs = 3;
  const Pools p = tiny_pools();
  testing::TempDir full("resume_full"), part("resume_part");
  RunOptions of;
  of.out_dir = full.path();
  const Perturbation want = run_meta_train(c, p, of);

  // Leave the state a one-epoch run would have written, under the 3-epoch digest.
  RunConfig one = c;
  one.meta.meta_epochs = 1;
  RunOptions op;
  op.out_dir = part.path();
  run_meta_train(one, p, op);
  nlohmann::json state = nlohmann::json::parse(read_text(part / "stage1_state.json"));
  EXPECT_EQ(state.at("epochs_done"), 1);
  state["config_digest"] = config_digest(c);
  write_text(part / "stage1_state.json", state.dump());
  const Perturbation resumed = run_meta_train(c, p, op);
  EXPECT_EQ(resumed.delta, want.delta);
  EXPECT_EQ(read_text(part / "stage1_epochs.csv"), read_text(full / "stage1_epochs.csv"));
  EXPECT_EQ(read_text(part / "stage1_trace.csv"), read_text(full / "stage1_trace.csv"));
}

TEST(Experiment, StaleBankIsRejected) {
  RunConfig c = tiny_config();
  const Pools p = tiny_pools();
  testing::TempDir dir("stale");
  Context ctx = make_context(c, p);
  prepare_banks(ctx, dir.path());
  c.clusters = 3;
  Context other = make_context(c, p);
  EXPECT_UAP_ERROR(prepare_banks(other, dir.path()), ErrorCode::kVersionMismatch);
}

TEST(Experiment, BaselineArmBuildsNoBanks) {
  RunConfig c = tiny_config();
  c.toggles = {false, false, false, false};
  const Pools p = tiny_pools();
  testing::TempDir dir("baseline");
  RunOptions o;
  o.out_dir = dir / "out";
  o.bank_dir = dir / "banks";
  const auto r = run_experiment(c, p, o);
  EXPECT_FALSE(fs::exists(dir / "banks"));
  EXPECT_EQ(r.delta0.delta, DenseTensor({16, 16, 3}));
  EXPECT_EQ(r.violations, 0u);
}

TEST(Experiment, SnapshotsAreReported) {
  RunConfig c = tiny_config();
  c.snapshot_steps = {2, 4};
  const Pools p = tiny_pools();
  testing::TempDir dir("snap");
  RunOptions o;
  o.out_dir = dir.path();
  const auto r = run_experiment(c, p, o);
  EXPECT_TRUE(fs::exists(delta_path(dir.path(), 0, 2)));
  EXPECT_FALSE(fs::exists(delta_path(dir.path(), 0, 4)));
  std::set<std::size_t> steps;
  for (const auto& row : r.report.rows) steps.insert(row.step);
  EXPECT_EQ(steps, (std::set<std::size_t>{2, 4}));
  // Saved perturbations evaluate to the same report rows.
  const ProxyReport saved = evaluate_saved(c, p, dir.path());
  for (const auto& row : saved.rows) {
    bool found = false;
    for (const auto& orig : r.report.rows)
      found |= orig.step == 4 && orig.target == row.target && orig.split == row.split && orig.encoder == row.encoder &&
               orig.delta == row.delta;
    EXPECT_TRUE(found);
  }
}

TEST(VarianceStudy, SingleM) {
  const RunConfig c = tiny_config();
  const Pools p = tiny_pools();
  const auto vs = variance_study(c, p, 0, 0, DenseTensor({16, 16, 3}), {1}, 4);
  ASSERT_EQ(vs.rows.size(), 1u);
  EXPECT_TRUE(std::isnan(vs.decay));
  EXPECT_GT(vs.rows[0].grad_var, 0.0);
  EXPECT_EQ(vs.csv().substr(0, vs.csv().find('\n')), "m,grad_mean,grad_var");
  EXPECT_UAP_ERROR(variance_study(c, p, 0, 0, DenseTensor({16, 16, 3}), {}, 4), ErrorCode::kInvalidArgument);
}

TEST(VarianceStudy, CropIndependentTargetHasNoVariance) {
  // A flat target makes every crop (and its clustering) identical.
  const RunConfig c = tiny_config();
  Pools p = tiny_pools();
  p.targets.images[0] = DenseTensor({16, 16, 3}, 0.4);
  const auto vs = variance_study(c, p, 0, 1, DenseTensor({16, 16, 3}), {1, 2, 4}, 5);
  for (const auto& r : vs.rows) EXPECT_LT(r.grad_var, 1e-24);
}

TEST(VarianceStudy, LogLogSlope) {
  std::vector<VarianceRow> rows;
  for (std::size_t m : {1, 2, 4, 8}) rows.push_back({m, 0.0, 3.0 / static_cast<double>(m)});
  EXPECT_NEAR(loglog_decay(rows), 1.0, 1e-12);
}

TEST(Unbiasedness, GridAndEstimator) {
  const auto grid = enumerate_crop_grid(16, 16, {0.5, 1.0}, 4, 4);
  EXPECT_EQ(grid.size(), 9u + 1u);
  for (const auto& g : grid) EXPECT_TRUE(g.fits(16, 16));
  const auto r = unbiasedness_check(tiny_config(), tiny_pools(), 0, 0, DenseTensor({16, 16, 3}), grid, 2, 50);
  EXPECT_EQ(r.grid_size, 10u);
  EXPECT_GT(r.standard_error, 0.0);
  EXPECT_TRUE(std::isfinite(r.z()));
}

TEST(Ablation, TablesProduceOneRowPerArm) {
  RunConfig c = tiny_config();
  c.toggles.meta_init = false;
  c.meta.adapt_steps = 2;
  testing::TempDir dir("ablate");
  const auto out = ablation_suite(c, {0}, [](std::uint64_t s) { return tiny_pools(s); }, dir.path(), {"table3"});
  ASSERT_EQ(out.at("table3").size(), 5u);
  EXPECT_EQ(first_line(dir / "table3.csv"), kAblationHeader);
  const auto t5 = run_table5(c, {0}, [](std::uint64_t s) { return tiny_pools(s); }, {1, 2});
  ASSERT_EQ(t5.size(), 4u);
  EXPECT_EQ(t5[0].arm, "meta");
  EXPECT_EQ(t5[3].arm, "zero");
  EXPECT_EQ(t5[3].step, 2u);
}

}  // namespace
}  // namespace uap
