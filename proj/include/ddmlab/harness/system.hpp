#pragma once

// A trained system (dataset, experts, router) and its on-disk layout:
//   <out>/data/dataset.{csv,json}
//   <out>/checkpoints/expert_<k>.ddl, <out>/checkpoints/router.ddl

#include <cstdio>
#include <string>
#include <vector>

#include "ddmlab/checkpoint.hpp"
#include "ddmlab/dataworld.hpp"
#include "ddmlab/flowexperts.hpp"
#include "ddmlab/harness/config.hpp"
#include "ddmlab/router.hpp"

namespace ddmlab::harness {

struct System {
  Dataset ds;
  ExpertEnsemble ens;
  Router router;
};

inline Dataset make_dataset(const LabConfig& cfg) {
  return partition_dataset(generate_mixture(cfg.data_seed(), cfg.K, cfg.d, cfg.n_per_cluster, cfg.separation), cfg.kmeans_seed());
}

/// Trains experts and router. Weights are rounded to float32 so a system
/// reloaded from checkpoints is identical to the one kept in memory.
inline System train_system(const LabConfig& cfg, Dataset ds, int workers = 1) {
  System s;
  s.ens = train_ensemble(ds, cfg.expert_config(), workers);
  for (auto& e : s.ens.experts) e.net = round_to_f32(std::move(e.net));
  s.router = train_router(ds, cfg.router_config());
  s.router.net = round_to_f32(std::move(s.router.net));
  s.ds = std::move(ds);
  return s;
}

inline System build_system(const LabConfig& cfg, int workers = 1) { return train_system(cfg, make_dataset(cfg), workers); }

inline fs::path dataset_stem(const fs::path& out) { return out / "data" / "dataset"; }

inline fs::path expert_path(const fs::path& out, int k) {
  char name[32];
  std::snprintf(name, sizeof name, "expert_%02d.ddl", k);
  return out / "checkpoints" / name;
}

inline fs::path router_path(const fs::path& out) { return out / "checkpoints" / "router.ddl"; }

inline void save_system_checkpoints(const fs::path& out, const System& s, const LabConfig& cfg) {
  const auto ec = cfg.expert_config();
  for (const auto& e : s.ens.experts)
    save_checkpoint(expert_path(out, e.cluster_id), e.net,
                    {"expert", e.time_features, e.cluster_id, derive_seed(ec.seed, "expert", static_cast<std::uint64_t>(e.cluster_id)), e.train_config_hash});
  const auto rc = cfg.router_config();
  save_checkpoint(router_path(out), s.router.net, {"router", s.router.m, -1, rc.seed, rc.hash()});
}

inline Dataset load_run_dataset(const fs::path& out) {
  if (!fs::exists(dataset_stem(out).string() + ".csv"))
    throw ConfigError("no dataset under " + (out / "data").string() + "; run `ddmlab gen-data` first");
  return load_dataset(dataset_stem(out));
}

inline System load_system(const fs::path& out) {
  System s;
  s.ds = load_run_dataset(out);
  if (!fs::exists(router_path(out))) throw ConfigError("no checkpoints under " + (out / "checkpoints").string() + "; run `ddmlab train` first");
  s.ens.d = s.ds.d;
  for (int k = 0; k < s.ds.K; ++k) {
    const auto p = expert_path(out, k);
    if (!fs::exists(p)) throw ConfigError("missing " + p.string() + "; run `ddmlab train` first");
    auto ck = load_checkpoint(p);
    if (ck.meta.kind != "expert" || ck.meta.cluster_id != k) throw FormatError(p.string() + ": not the checkpoint of expert " + std::to_string(k));
    s.ens.experts.push_back({std::move(ck.net), k, ck.meta.train_config_hash, ck.meta.m});
  }
  s.ens.validate();
  auto rk = load_checkpoint(router_path(out));
  if (rk.meta.kind != "router") throw FormatError(router_path(out).string() + ": not a router checkpoint");
  s.router = {std::move(rk.net), rk.meta.m};
  if (s.router.K() != s.ens.K()) throw FormatError("router and experts disagree on K");
  return s;
}

/// Initial noise for sample i of a run.
inline Vec noise_sample(std::uint64_t master_seed, int d, std::uint64_t i, const char* role = "noise") {
  Stream s(derive_seed(master_seed, role, i));
  Vec x(d);
  for (int j = 0; j < d; ++j) x[j] = s.normal();
  return x;
}

inline std::vector<Vec> noise_batch(std::uint64_t master_seed, int d, int count, const char* role = "noise") {
  std::vector<Vec> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) out.push_back(noise_sample(master_seed, d, static_cast<std::uint64_t>(i), role));
  return out;
}

}  // namespace ddmlab::harness
