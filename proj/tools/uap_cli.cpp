// Copyright (c) 2026 The uap Authors
// SPDX-License-Identifier: Apache-2.0
//
// uap command line. Every subcommand except convert-ppm and
// gen-synthetic-pool takes --config (a JSON RunConfig; defaults when absent).

#include <cstdio>
#include <iostream>
#include <mutex>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "uap/uap.hpp"

namespace {

using namespace uap;

std::mutex log_mu;

void log_line(const std::string& s) {
  std::lock_guard lock(log_mu);
  std::cerr << s << "\n";
}

RunConfig config_or_default(const std::string& path) {
  return path.empty() ? RunConfig{} : load_config(path);
}

RunOptions options(const RunConfig& cfg, bool quiet) {
  RunOptions o;
  o.out_dir = fs::path(cfg.output_dir);
  o.bank_dir = fs::path(cfg.bank_dir);
  if (!quiet) o.log = log_line;
  return o;
}

std::vector<std::size_t> parse_list(const std::string& s) {
  std::vector<std::size_t> out;
  std::size_t pos = 0;
  while (pos < s.size()) {
    const auto next = s.find(',', pos);
    const std::string item = s.substr(pos, next == std::string::npos ? std::string::npos : next - pos);
    try {
      out.push_back(std::stoul(item));
    } catch (const std::exception&) {
      fail(ErrorCode::kInvalidArgument, "not an integer list: " + s);
    }
    if (next == std::string::npos) break;
    pos = next + 1;
  }
  return out;
}

void convert(const fs::path& in, const fs::path& out, bool to_ppm) {
  if (to_ppm)
    write_ppm(clip_pixels(read_ntf(in)), out);
  else
    write_ntf(read_ppm(in), out);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Universal targeted perturbations with multi-crop alignment and meta-initialization"};
  app.require_subcommand(1);
  std::string config_path;
  bool quiet = false;
  app.add_flag("-q,--quiet", quiet, "No progress lines on stderr");

  auto with_config = [&](CLI::App* sub) {
    sub->add_option("-c,--config", config_path, "RunConfig JSON file")->check(CLI::ExistingFile);
  };

  auto* bank = app.add_subcommand("build-bank", "Build (or verify) every target's bank under bank_dir");
  with_config(bank);

  auto* meta = app.add_subcommand("meta-train", "Stage-1: meta-train delta0 (resumes at epoch granularity)");
  with_config(meta);

  std::string delta0_path;
  auto* adapt = app.add_subcommand("adapt", "Stage-2 for every target, then proxy evaluation");
  with_config(adapt);
  adapt->add_option("--delta0", delta0_path,
                    "Initialization NTF (default: output_dir/delta0.ntf when meta_init is on, else zeros)");

  std::string run_dir;
  auto* eval = app.add_subcommand("eval", "Proxy evaluation of saved per-target perturbations");
  with_config(eval);
  eval->add_option("--run-dir", run_dir, "Directory holding deltas/ (default: output_dir)");

  std::string m_list = "1,2,4,8,16", study_out;
  std::size_t resamples = 200, study_target = 0, study_source = 0;
  std::string study_delta;
  auto* var = app.add_subcommand("variance-study", "Gradient variance against m i.i.d. target crops");
  with_config(var);
  var->add_option("--m", m_list, "Comma-separated crop counts")->capture_default_str();
  var->add_option("--resamples", resamples, "Estimates per m")->capture_default_str();
  var->add_option("--target", study_target, "Target pool index")->capture_default_str();
  var->add_option("--source", study_source, "Source pool index")->capture_default_str();
  var->add_option("--delta", study_delta, "Fixed perturbation NTF (default zeros)");
  var->add_option("--out", study_out, "CSV path (default output_dir/variance_study.csv)");

  std::string seeds_arg = "0,1,2,3,4,5,6,7,8,9", tables_arg = "table2,table3,table4,table5";
  bool synthetic = false;
  auto* ablate = app.add_subcommand("ablate", "Ablation grids; one CSV per table in output_dir");
  with_config(ablate);
  ablate->add_option("--seeds", seeds_arg, "Comma-separated master seeds")->capture_default_str();
  ablate->add_option("--tables", tables_arg, "Subset of table2,table3,table4,table5")->capture_default_str();
  ablate->add_flag("--synthetic", synthetic, "Generate default synthetic pools per seed instead of reading pools");

  std::string conv_in, conv_out;
  bool to_ppm = false;
  auto* conv = app.add_subcommand("convert-ppm", "PPM (P6) to NTF, or NTF to PPM with --to-ppm; files or directories");
  conv->add_option("input", conv_in, "Input file or directory")->required();
  conv->add_option("output", conv_out, "Output file or directory")->required();
  conv->add_flag("--to-ppm", to_ppm, "Convert NTF to PPM (pixels clipped to [0, 1])");

  std::string pool_out = "pools";
  std::size_t n_targets = 10, n_sources = 20, n_unseen = 30, side = 32;
  std::uint64_t pool_seed = 0;
  auto* gen = app.add_subcommand("gen-synthetic-pool", "Write procedural target/source/unseen pools as NTF");
  gen->add_option("--out", pool_out, "Root directory (target/, source/, unseen/)")->capture_default_str();
  gen->add_option("--targets", n_targets)->capture_default_str();
  gen->add_option("--sources", n_sources)->capture_default_str();
  gen->add_option("--unseen", n_unseen)->capture_default_str();
  gen->add_option("--side", side, "Image side in pixels")->capture_default_str();
  gen->add_option("--seed", pool_seed)->capture_default_str();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) {
      SyntheticSpec spec;
      spec.side = side;
      const Pools p = synthetic_pools(pool_seed, {n_targets, n_sources, n_unseen}, spec);
      save_pool(p.targets, fs::path(pool_out) / "target");
      save_pool(p.sources, fs::path(pool_out) / "source");
      save_pool(p.unseen, fs::path(pool_out) / "unseen");
      std::cout << "wrote " << n_targets << " targets, " << n_sources << " sources, " << n_unseen << " unseen to "
                << pool_out << "\n";
      return 0;
    }
    if (*conv) {
      const fs::path in(conv_in), out(conv_out);
      if (fs::is_directory(in)) {
        fs::create_directories(out);
        std::size_t n = 0;
        std::vector<fs::path> files;
        for (const auto& e : fs::directory_iterator(in))
          if (e.is_regular_file() && e.path().extension() == (to_ppm ? ".ntf" : ".ppm")) files.push_back(e.path());
        std::sort(files.begin(), files.end());
        for (const auto& f : files) {
          convert(f, out / f.filename().replace_extension(to_ppm ? ".ppm" : ".ntf"), to_ppm);
          ++n;
        }
        std::cout << "converted " << n << " files\n";
      } else {
        convert(in, out, to_ppm);
      }
      return 0;
    }

    const RunConfig cfg = config_or_default(config_path);
    if (*ablate) {
      std::vector<std::uint64_t> seeds;
      for (auto s : parse_list(seeds_arg)) seeds.push_back(s);
      std::set<std::string> tables;
      std::size_t pos = 0;
      while (pos <= tables_arg.size()) {
        const auto next = tables_arg.find(',', pos);
        tables.insert(tables_arg.substr(pos, next == std::string::npos ? std::string::npos : next - pos));
        if (next == std::string::npos) break;
        pos = next + 1;
      }
      PoolFactory factory;
      if (synthetic) {
        SyntheticSpec spec;
        spec.side = cfg.dims.image_size;
        factory = [spec](std::uint64_t seed) { return synthetic_pools(seed, {}, spec); };
      } else {
        const Pools fixed = load_pools(cfg);
        factory = [fixed](std::uint64_t) { return fixed; };
      }
      const auto out = ablation_suite(cfg, seeds, factory, fs::path(cfg.output_dir), tables);
      for (const auto& [name, rows] : out)
        std::cout << name << ": " << rows.size() << " rows -> " << (fs::path(cfg.output_dir) / (name + ".csv")) << "\n";
      return 0;
    }

    const Pools pools = load_pools(cfg);
    if (*bank) {
      Context ctx = make_context(cfg, pools);
      require(cfg.uses_banks(), ErrorCode::kConfigInvalid, "mca is off: this configuration uses no banks");
      prepare_banks(ctx, fs::path(cfg.bank_dir));
      std::cout << "banks ready for " << pools.targets.size() << " targets in " << cfg.bank_dir << " (settings "
                << to_hex(cfg.bank_settings().digest()).substr(0, 12) << ")\n";
    } else if (*meta) {
      const Perturbation d = run_meta_train(cfg, pools, options(cfg, quiet));
      std::cout << "delta0 linf " << fmt(d.delta.linf_norm()) << " -> " << (fs::path(cfg.output_dir) / "delta0.ntf")
                << "\n";
    } else if (*adapt) {
      RunOptions o = options(cfg, quiet);
      const fs::path default_d0 = fs::path(cfg.output_dir) / "delta0.ntf";
      if (!delta0_path.empty())
        o.delta0 = Perturbation{read_ntf(delta0_path), cfg.meta.eps};
      else if (cfg.toggles.meta_init && fs::exists(default_d0))
        o.delta0 = Perturbation{read_ntf(default_d0), cfg.meta.eps};
      const ExperimentResult r = run_experiment(cfg, pools, o);
      std::cout << "unseen/heldout mean delta " << fmt(r.report.mean_delta("unseen", "heldout")) << ", updates "
                << r.updates << ", budget violations " << r.violations << "\n";
      return r.violations == 0 ? 0 : 3;
    } else if (*eval) {
      const fs::path dir = run_dir.empty() ? fs::path(cfg.output_dir) : fs::path(run_dir);
      const ProxyReport rep = evaluate_saved(cfg, pools, dir);
      write_text(dir / "proxy_report.csv", rep.csv());
      std::cout << "unseen/heldout mean delta " << fmt(rep.mean_delta("unseen", "heldout")) << " -> "
                << (dir / "proxy_report.csv") << "\n";
    } else if (*var) {
      const DenseTensor delta = study_delta.empty() ? DenseTensor(pools.targets.images.front().shape(), 0.0)
                                                    : read_ntf(study_delta);
      const VarianceStudy vs =
          variance_study(cfg, pools, study_target, study_source, delta, parse_list(m_list), resamples);
      const fs::path out = study_out.empty() ? fs::path(cfg.output_dir) / "variance_study.csv" : fs::path(study_out);
      write_text(out, vs.csv());
      std::cout << "variance decay exponent " << fmt(vs.decay) << " -> " << out << "\n";
    }
  } catch (const Error& e) {
    std::cerr << "error [" << to_string(e.code()) << "]: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
