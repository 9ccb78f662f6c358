#pragma once

// Probability-flow ODE integration from noise (t = 1) to data (t = 0) on the
// grid t_n = (N - n) / N, with one-step Euler and Heun updates.

#include <cmath>
#include <cstdint>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "ddmlab/errors.hpp"
#include "ddmlab/flowexperts.hpp"
#include "ddmlab/numcore.hpp"
#include "ddmlab/router.hpp"
#include "ddmlab/rng.hpp"

namespace ddmlab {

enum class Solver { Euler, Heun };

inline std::string to_string(Solver s) { return s == Solver::Euler ? "euler" : "heun"; }

inline Solver solver_from_string(const std::string& s) {
  if (s == "euler") return Solver::Euler;
  if (s == "heun") return Solver::Heun;
  throw ConfigError("unknown solver '" + s + "' (expected euler or heun)");
}

struct SamplerConfig {
  int N = 50;
  Solver solver = Solver::Heun;
  bool record_all_experts = false;
  bool record_decisions = true;
  double t_floor = 0.0;

  void validate() const {
    if (N < 1) throw ConfigError("SamplerConfig: N must be >= 1");
    if (!(t_floor >= 0.0)) throw ConfigError("SamplerConfig: t_floor must be >= 0");
  }
};

struct Trajectory {
  std::vector<double> times;                     // t_n = 1 - n h, n = 0..N
  Mat states;                                    // (N+1) x d, row 0 is the initial noise
  std::vector<RoutingDecision> decisions;        // one per state when recorded
  std::vector<std::vector<Vec>> velocities_all;  // per state, K expert velocities when recorded
  Solver solver = Solver::Heun;
  std::uint64_t seed = 0;
  double h = 0.0;
  int N = 0;

  Vec state(int n) const { return states.row(n).transpose(); }
  Vec endpoint() const { return state(N); }
};

/// Grid times (N - n) / N, exact at both ends.
inline std::vector<double> time_grid(int N) {
  std::vector<double> t(static_cast<std::size_t>(N) + 1);
  for (int n = 0; n <= N; ++n) t[static_cast<std::size_t>(n)] = static_cast<double>(N - n) / static_cast<double>(N);
  return t;
}

namespace detail {

inline void check_finite(const Vec& v, const Vec& x, double t) {
  if (!v.allFinite()) {
    std::ostringstream os;
    os << "non-finite velocity at t=" << t << ", |x|=" << x.norm();
    throw NumericalError(os.str());
  }
}

inline void check_step(double t, double h) {
  if (t - h < -1e-12) throw DomainError("step would cross t=0 (t=" + std::to_string(t) + ", h=" + std::to_string(h) + ")");
}

template <class Field>
Vec euler_to(Field&& field, const Vec& x, double t, double h) {
  const Vec k1 = field(x, t);
  check_finite(k1, x, t);
  return x - h * k1;
}

template <class Field>
Vec heun_to(Field&& field, const Vec& x, double t, double h, double t_next) {
  const Vec k1 = field(x, t);
  check_finite(k1, x, t);
  const Vec pred = x - h * k1;
  const Vec k2 = field(pred, t_next);
  check_finite(k2, pred, t_next);
  return x - (0.5 * h) * (k1 + k2);
}

}  // namespace detail

/// x - h * v(x, t). Time runs backwards.
template <class Field>
Vec euler_step(Field&& field, const Vec& x, double t, double h) {
  detail::check_step(t, h);
  return detail::euler_to(field, x, t, h);
}

/// Explicit trapezoid: k1 = v(x, t), k2 = v(x - h k1, t - h), x - h/2 (k1 + k2).
template <class Field>
Vec heun_step(Field&& field, const Vec& x, double t, double h) {
  detail::check_step(t, h);
  return detail::heun_to(field, x, t, h, t - h);
}

/// Integrates an arbitrary field v(x, t) over the grid; no routing is recorded.
template <class Field>
Trajectory integrate(Field&& field, const Vec& x1, const SamplerConfig& cfg, std::uint64_t seed = 0) {
  cfg.validate();
  Trajectory tr;
  tr.N = cfg.N;
  tr.h = 1.0 / cfg.N;
  tr.solver = cfg.solver;
  tr.seed = seed;
  tr.times = time_grid(cfg.N);
  tr.states.resize(cfg.N + 1, x1.size());
  tr.states.row(0) = x1.transpose();
  auto clamped = [&](const Vec& x, double t) -> Vec { return field(x, std::max(t, cfg.t_floor)); };
  Vec x = x1;
  for (int n = 0; n < cfg.N; ++n) {
    const double t = tr.times[static_cast<std::size_t>(n)];
    const double tn = tr.times[static_cast<std::size_t>(n) + 1];
    try {
      x = cfg.solver == Solver::Euler ? detail::euler_to(clamped, x, t, tr.h) : detail::heun_to(clamped, x, t, tr.h, tn);
    } catch (const NumericalError& e) {
      throw NumericalError("step " + std::to_string(n) + ": " + e.what());
    }
    tr.states.row(n + 1) = x.transpose();
  }
  return tr;
}

/// Random stream used by MisalignedTopK along one trajectory.
inline Stream policy_stream(const RoutingPolicy& policy, std::uint64_t trajectory_seed) {
  return Stream(derive_seed(policy.stream_seed, "misaligned", trajectory_seed));
}

/// Integrates the routed field from x1. Decisions (and optionally all expert
/// velocities) are recorded at every grid state including the endpoint;
/// recording never changes the path.
inline Trajectory sample_trajectory(const ExpertEnsemble& ens, const Router& router, const RoutingPolicy& policy,
                                    const Vec& x1, const SamplerConfig& cfg, std::uint64_t seed = 0) {
  cfg.validate();
  if (x1.size() != ens.d) throw ShapeError("sample_trajectory: x1 has wrong dimension");
  Stream stream = policy_stream(policy, seed);
  Trajectory tr;
  tr.N = cfg.N;
  tr.h = 1.0 / cfg.N;
  tr.solver = cfg.solver;
  tr.seed = seed;
  tr.times = time_grid(cfg.N);
  tr.states.resize(cfg.N + 1, x1.size());
  tr.states.row(0) = x1.transpose();

  RoutingDecision first_decision;
  bool capture = false;
  auto field = [&](const Vec& x, double t) -> Vec {
    auto rv = routed_velocity(ens, router, policy, x, std::max(t, cfg.t_floor), &stream);
    if (capture) {
      first_decision = std::move(rv.decision);
      capture = false;
    }
    return rv.v;
  };

  Vec x = x1;
  for (int n = 0; n < cfg.N; ++n) {
    const double t = tr.times[static_cast<std::size_t>(n)];
    const double tn = tr.times[static_cast<std::size_t>(n) + 1];
    if (cfg.record_all_experts) tr.velocities_all.push_back(ensemble_velocities(ens, x, t));
    capture = cfg.record_decisions;
    try {
      x = cfg.solver == Solver::Euler ? detail::euler_to(field, x, t, tr.h) : detail::heun_to(field, x, t, tr.h, tn);
    } catch (const NumericalError& e) {
      throw NumericalError("step " + std::to_string(n) + ": " + e.what());
    }
    if (cfg.record_decisions) tr.decisions.push_back(std::move(first_decision));
    tr.states.row(n + 1) = x.transpose();
  }
  if (cfg.record_all_experts) tr.velocities_all.push_back(ensemble_velocities(ens, x, 0.0));
  if (cfg.record_decisions) {
    Stream fork = stream;
    tr.decisions.push_back(routed_velocity(ens, router, policy, x, std::max(0.0, cfg.t_floor), &fork).decision);
  }
  return tr;
}

struct RefinementPair {
  Vec coarse;  // N steps
  Vec fine;    // 2N steps
};

/// Heun endpoints at N and 2N steps from the same initial noise.
inline RefinementPair refinement_pair(const ExpertEnsemble& ens, const Router& router, const RoutingPolicy& policy,
                                      const Vec& x1, int N, std::uint64_t seed = 0) {
  if (N < 1) throw ConfigError("refinement_pair: N must be >= 1");
  SamplerConfig cfg;
  cfg.solver = Solver::Heun;
  cfg.record_decisions = false;
  cfg.N = N;
  Vec coarse = sample_trajectory(ens, router, policy, x1, cfg, seed).endpoint();
  cfg.N = 2 * N;
  Vec fine = sample_trajectory(ens, router, policy, x1, cfg, seed).endpoint();
  return {std::move(coarse), std::move(fine)};
}

template <class Field>
RefinementPair refinement_pair_field(Field&& field, const Vec& x1, int N, Solver solver = Solver::Heun) {
  SamplerConfig cfg;
  cfg.N = N;
  cfg.solver = solver;
  Vec coarse = integrate(field, x1, cfg).endpoint();
  cfg.N = 2 * N;
  return {std::move(coarse), integrate(field, x1, cfg).endpoint()};
}

/// CSV dump: n,t,x_0..x_{d-1},selected,entropy (selected indices joined by ';').
inline std::string trajectory_csv(const Trajectory& tr) {
  std::ostringstream os;
  os.precision(17);
  const auto d = tr.states.cols();
  os << "n,t";
  for (Eigen::Index j = 0; j < d; ++j) os << ",x_" << j;
  os << ",selected,entropy\n";
  for (int n = 0; n <= tr.N; ++n) {
    os << n << ',' << tr.times[static_cast<std::size_t>(n)];
    for (Eigen::Index j = 0; j < d; ++j) os << ',' << tr.states(n, j);
    os << ',';
    if (static_cast<std::size_t>(n) < tr.decisions.size()) {
      const auto& dec = tr.decisions[static_cast<std::size_t>(n)];
      for (std::size_t i = 0; i < dec.selected.size(); ++i) os << (i ? ";" : "") << dec.selected[i];
      os << ',' << dec.entropy_nats;
    } else {
      os << ',';
    }
    os << '\n';
  }
  return os.str();
}

inline nlohmann::json trajectory_metadata(const Trajectory& tr, const std::string& policy_name) {
  return {{"solver", to_string(tr.solver)}, {"N", tr.N},       {"h", tr.h},
          {"seed", tr.seed},                {"d", tr.states.cols()}, {"policy", policy_name},
          {"recorded_decisions", tr.decisions.size()}, {"recorded_all_experts", !tr.velocities_all.empty()}};
}

}  // namespace ddmlab
