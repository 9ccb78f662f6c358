#pragma once

// Lab configuration and seed derivation.
//
// Every random stream in a run is seeded from the master seed:
//   data        derive_seed(master, "data")
//   partition   derive_seed(master, "kmeans")
//   experts     derive_seed(master, "experts"), expert k then uses
//               derive_seed(that, "expert", k)
//   router      derive_seed(master, "router")
//   noise i     derive_seed(master, "noise", i)
//   misaligned  derive_seed(master, "misaligned-policy")
//   power iter  derive_seed(master, "power-iteration", i)
// with derive_seed(s, role, i) = splitmix64(s ^ fnv1a64(role) ^ i).

#include <algorithm>
#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"

#include "ddmlab/errors.hpp"
#include "ddmlab/flowexperts.hpp"
#include "ddmlab/harness/io.hpp"
#include "ddmlab/router.hpp"
#include "ddmlab/sampler.hpp"

namespace ddmlab::harness {

using nlohmann::json;

struct LabConfig {
  std::uint64_t master_seed = 1;
  int K = 8;
  int d = 8;
  int n_per_cluster = 256;
  double separation = 6.0;
  TrainConfig expert;
  TrainConfig router;
  int N = 50;
  Solver solver = Solver::Heun;
  std::vector<std::string> policies{"top1", "top2", "full"};
  int samples = 500;
  int jacobian_samples = 200;
  bool paper_n = false;
  double convergence_epsilon = 0.01;
  json overrides = json::object();

  std::uint64_t data_seed() const { return derive_seed(master_seed, "data"); }
  std::uint64_t kmeans_seed() const { return derive_seed(master_seed, "kmeans"); }
  std::uint64_t misaligned_seed() const { return derive_seed(master_seed, "misaligned-policy"); }
  std::uint64_t power_seed(std::uint64_t i) const { return derive_seed(master_seed, "power-iteration", i); }

  TrainConfig expert_config() const {
    TrainConfig c = expert;
    c.seed = derive_seed(master_seed, "experts");
    return c;
  }
  TrainConfig router_config() const {
    TrainConfig c = router;
    c.seed = derive_seed(master_seed, "router");
    return c;
  }

  SamplerConfig sampler() const {
    SamplerConfig s;
    s.N = N;
    s.solver = solver;
    return s;
  }

  /// Sample count for a preset whose paper counterpart used `paper_count`.
  int count(int paper_count, bool jacobian_heavy) const {
    if (paper_n) return paper_count;
    return std::min(paper_count, jacobian_heavy ? jacobian_samples : samples);
  }

  /// Parses a policy name; misaligned policies get the run's stream seed.
  RoutingPolicy policy(const std::string& name) const {
    RoutingPolicy p = RoutingPolicy::parse(name);
    if (p.kind == RoutingPolicy::Kind::MisalignedTopK) p.stream_seed = misaligned_seed();
    p.validate(K);
    return p;
  }

  json override_for(const std::string& preset) const {
    return overrides.contains(preset) ? overrides.at(preset) : json::object();
  }

  void validate() const {
    if (K < 2 || d < 2 || n_per_cluster < 8 || !(separation > 0.0)) throw ConfigError("LabConfig: need K >= 2, d >= 2, n_per_cluster >= 8, separation > 0");
    expert.validate();
    router.validate();
    sampler().validate();
    if (samples < 1 || jacobian_samples < 1) throw ConfigError("LabConfig: sample counts must be positive");
    if (!(convergence_epsilon > 0.0)) throw ConfigError("LabConfig: convergence_epsilon must be > 0");
    for (const auto& p : policies) policy(p);
  }
};

inline json train_config_json(const TrainConfig& c) {
  return {{"steps", c.steps}, {"batch", c.batch}, {"lr", c.lr}, {"beta1", c.adam_betas.first}, {"beta2", c.adam_betas.second},
          {"eps", c.adam_eps}, {"hidden", c.hidden_dims}, {"m", c.m}};
}

inline TrainConfig train_config_from_json(const json& j, TrainConfig c = {}) {
  c.steps = j.value("steps", c.steps);
  c.batch = j.value("batch", c.batch);
  c.lr = j.value("lr", c.lr);
  c.adam_betas.first = j.value("beta1", c.adam_betas.first);
  c.adam_betas.second = j.value("beta2", c.adam_betas.second);
  c.adam_eps = j.value("eps", c.adam_eps);
  c.hidden_dims = j.value("hidden", c.hidden_dims);
  c.m = j.value("m", c.m);
  return c;
}

inline json to_json(const LabConfig& c) {
  return {{"master_seed", c.master_seed},
          {"K", c.K},
          {"d", c.d},
          {"n_per_cluster", c.n_per_cluster},
          {"separation", c.separation},
          {"expert", train_config_json(c.expert)},
          {"router", train_config_json(c.router)},
          {"sampler", {{"N", c.N}, {"solver", to_string(c.solver)}}},
          {"policies", c.policies},
          {"samples", c.samples},
          {"jacobian_samples", c.jacobian_samples},
          {"paper_n", c.paper_n},
          {"convergence_epsilon", c.convergence_epsilon},
          {"overrides", c.overrides}};
}

/// Missing keys keep their defaults; unknown keys are rejected.
inline LabConfig lab_config_from_json(const json& j) {
  static const std::vector<std::string> known{"master_seed", "K", "d", "n_per_cluster", "separation", "expert", "router", "sampler",
                                              "policies", "samples", "jacobian_samples", "paper_n", "convergence_epsilon", "overrides"};
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  for (const auto& [k, v] : j.items())
    if (std::find(known.begin(), known.end(), k) == known.end()) throw ConfigError("unknown config key '" + k + "'");
  LabConfig c;
  try {
    c.master_seed = j.value("master_seed", c.master_seed);
    c.K = j.value("K", c.K);
    c.d = j.value("d", c.d);
    c.n_per_cluster = j.value("n_per_cluster", c.n_per_cluster);
    c.separation = j.value("separation", c.separation);
    if (j.contains("expert")) c.expert = train_config_from_json(j["expert"], c.expert);
    if (j.contains("router")) c.router = train_config_from_json(j["router"], c.router);
    if (j.contains("sampler")) {
      c.N = j["sampler"].value("N", c.N);
      if (j["sampler"].contains("solver")) c.solver = solver_from_string(j["sampler"]["solver"].get<std::string>());
    }
    c.policies = j.value("policies", c.policies);
    c.samples = j.value("samples", c.samples);
    c.jacobian_samples = j.value("jacobian_samples", c.jacobian_samples);
    c.paper_n = j.value("paper_n", c.paper_n);
    c.convergence_epsilon = j.value("convergence_epsilon", c.convergence_epsilon);
    if (j.contains("overrides")) c.overrides = j["overrides"];
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  c.validate();
  return c;
}

inline std::uint64_t config_hash(const LabConfig& c) { return fnv1a64(to_json(c).dump()); }

inline LabConfig load_lab_config(const fs::path& p) {
  try {
    return lab_config_from_json(json::parse(read_file(p)));
  } catch (const json::parse_error& e) {
    throw ConfigError(p.string() + ": " + e.what());
  }
}

/// Preset used for the strong-specialization experiment: K = 10 and the
/// separation doubled, everything else shared.
inline LabConfig strong_specialization(LabConfig c) {
  c.K = 10;
  c.separation *= 2.0;
  return c;
}

}  // namespace ddmlab::harness
