#pragma once

// The five CLI commands. Each resolves the configuration, does its stage,
// writes the effective config to <out>/config.json and refreshes the manifest.

#include <cstdio>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "ddmlab/harness/config.hpp"
#include "ddmlab/harness/experiments.hpp"
#include "ddmlab/harness/manifest.hpp"
#include "ddmlab/harness/report.hpp"
#include "ddmlab/harness/system.hpp"

namespace ddmlab::harness {

struct CommonOptions {
  std::optional<fs::path> config;
  std::optional<std::uint64_t> seed;
  fs::path out = "run";
  int workers = 1;
  bool paper_n = false;
};

/// --config wins; otherwise a config.json already in the run directory is
/// reused so later stages agree with earlier ones; otherwise defaults.
inline LabConfig resolve_config(const CommonOptions& o) {
  LabConfig cfg;
  if (o.config) cfg = load_lab_config(*o.config);
  else if (fs::exists(o.out / "config.json")) cfg = load_lab_config(o.out / "config.json");
  if (o.seed) cfg.master_seed = *o.seed;
  if (o.paper_n) cfg.paper_n = true;
  cfg.validate();
  return cfg;
}

inline void write_config(const fs::path& out, const LabConfig& cfg) { write_file(out / "config.json", to_json(cfg).dump(2) + "\n"); }

inline int cmd_gen_data(const CommonOptions& o, std::ostream& log = std::cout) {
  StageTimer timer;
  const auto cfg = resolve_config(o);
  const auto ds = make_dataset(cfg);
  save_dataset(ds, dataset_stem(o.out));
  write_config(o.out, cfg);
  update_manifest(o.out, cfg, "gen-data", timer.seconds());
  log << "dataset: " << ds.points.rows() << " points, K=" << ds.K << ", d=" << ds.d << " -> " << dataset_stem(o.out).string() << ".csv\n";
  return 0;
}

inline int cmd_train(const CommonOptions& o, std::ostream& log = std::cout) {
  StageTimer timer;
  const auto cfg = resolve_config(o);
  auto ds = load_run_dataset(o.out);
  if (ds.K != cfg.K || ds.d != cfg.d) throw ConfigError("dataset on disk does not match the config (K/d); rerun `ddmlab gen-data`");
  const auto sys = train_system(cfg, std::move(ds), o.workers);
  save_system_checkpoints(o.out, sys, cfg);
  write_config(o.out, cfg);
  update_manifest(o.out, cfg, "train", timer.seconds());
  log << "trained " << sys.ens.K() << " experts and the router -> " << (o.out / "checkpoints").string() << "\n";
  return 0;
}

struct SampleOptionsCli {
  std::vector<std::string> policies;  // empty: the config's list
  int count = 16;
};

inline int cmd_sample(const CommonOptions& o, const SampleOptionsCli& so, std::ostream& log = std::cout) {
  StageTimer timer;
  const auto cfg = resolve_config(o);
  const auto names = so.policies.empty() ? cfg.policies : so.policies;
  std::vector<RoutingPolicy> policies;
  for (const auto& n : names) policies.push_back(cfg.policy(n));  // usage errors before any work
  if (so.count < 1) throw ConfigError("sample: --count must be >= 1");
  const auto sys = load_system(o.out);
  const auto noise = noise_batch(cfg.master_seed, sys.ds.d, so.count);
  for (const auto& p : policies) {
    std::vector<Trajectory> trs(noise.size());
    parallel_for(noise.size(), o.workers, [&](std::size_t i) { trs[i] = sample_trajectory(sys.ens, sys.router, p, noise[i], cfg.sampler(), i); });
    const fs::path dir = o.out / "samples" / p.name();
    Table endpoints{"endpoints", {"sample", "nll"}, {}};
    for (int j = 0; j < sys.ds.d; ++j) endpoints.columns.push_back("x_" + std::to_string(j));
    for (std::size_t i = 0; i < trs.size(); ++i) {
      char stem[32];
      std::snprintf(stem, sizeof stem, "trajectory_%04zu", i);
      write_file(dir / (std::string(stem) + ".csv"), trajectory_csv(trs[i]));
      write_file(dir / (std::string(stem) + ".json"), trajectory_metadata(trs[i], p.name()).dump(2) + "\n");
      const Vec x = trs[i].endpoint();
      std::vector<Cell> row{static_cast<long long>(i), mixture_nll(x, sys.ds.mixture_means)};
      for (int j = 0; j < x.size(); ++j) row.push_back(x[j]);
      endpoints.add(std::move(row));
    }
    write_file(dir / "endpoints.csv", endpoints.csv());
    log << p.name() << ": " << trs.size() << " trajectories -> " << dir.string() << "\n";
  }
  write_config(o.out, cfg);
  update_manifest(o.out, cfg, "sample", timer.seconds());
  return 0;
}

inline int cmd_experiment(const CommonOptions& o, const std::string& name, std::ostream& log = std::cout) {
  StageTimer timer;
  const auto cfg = resolve_config(o);
  bool known = false;
  for (const auto& [n, fn] : presets()) known = known || n == name;
  if (!known) throw ConfigError("unknown experiment '" + name + "'; available: " + preset_names());
  const auto sys = load_system(o.out);
  const auto result = run_preset(name, Lab{cfg, sys, o.workers});
  const fs::path dir = experiments_dir(o.out) / name;
  write_result(dir, result);
  write_config(o.out, cfg);
  update_manifest(o.out, cfg, "experiment:" + name, timer.seconds());
  log << name << ": " << result.tables.size() << " tables -> " << dir.string() << "\n";
  return 0;
}

inline int cmd_report(const CommonOptions& o, std::ostream& log = std::cout) {
  StageTimer timer;
  const auto rs = write_report(o.out);
  if (rs.empty) log << "no experiment metrics under " << experiments_dir(o.out).string() << "; the report notes the gap\n";
  else log << "report: " << rs.presets << " presets, " << rs.plots << " plots -> " << report_dir(o.out).string() << "\n";
  const auto cfg = resolve_config(o);
  update_manifest(o.out, cfg, "report", timer.seconds());
  return 0;
}

}  // namespace ddmlab::harness
