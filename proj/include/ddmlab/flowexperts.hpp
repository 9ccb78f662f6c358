#pragma once

// Flow-matching experts, each trained in isolation on one data partition.
//
// Path convention: x_t = (1 - t) x0 + t x1 with x0 data and x1 ~ N(0, I), so
// t = 1 is pure noise and t = 0 is data; the regression target is x1 - x0.

#include <cmath>
#include <cstdint>
#include <memory>
#include <numbers>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "ddmlab/dataworld.hpp"
#include "ddmlab/errors.hpp"
#include "ddmlab/numcore.hpp"
#include "ddmlab/optim.hpp"
#include "ddmlab/parallel.hpp"
#include "ddmlab/rng.hpp"

namespace ddmlab {

struct TrainConfig {
  int steps = 4000;
  int batch = 64;
  double lr = 1e-3;
  std::pair<double, double> adam_betas{0.9, 0.999};
  double adam_eps = 1e-8;
  std::uint64_t seed = 1;
  std::vector<int> hidden_dims{64, 64};
  int m = 4;

  void validate() const {
    if (!(lr > 0.0)) throw ConfigError("TrainConfig: lr must be > 0");
    if (steps < 1) throw ConfigError("TrainConfig: steps must be >= 1");
    if (batch < 1) throw ConfigError("TrainConfig: batch must be >= 1");
    if (m < 0) throw ConfigError("TrainConfig: m must be >= 0");
    for (int h : hidden_dims)
      if (h <= 0) throw ConfigError("TrainConfig: hidden dims must be positive");
  }

  AdamConfig adam() const { return {lr, adam_betas.first, adam_betas.second, adam_eps}; }

  std::string canonical() const {
    std::ostringstream os;
    os.precision(17);
    os << "steps=" << steps << ";batch=" << batch << ";lr=" << lr << ";b1=" << adam_betas.first
       << ";b2=" << adam_betas.second << ";eps=" << adam_eps << ";seed=" << seed << ";m=" << m << ";hidden=";
    for (int h : hidden_dims) os << h << ',';
    return os.str();
  }

  std::uint64_t hash() const { return fnv1a64(canonical()); }
};

/// Fourier time features [sin(2 pi 2^i t), cos(2 pi 2^i t)] for i < m.
inline Vec time_features(double t, int m) {
  Vec f(2 * m);
  for (int i = 0; i < m; ++i) {
    const double w = 2.0 * std::numbers::pi * std::ldexp(1.0, i);
    f[2 * i] = std::sin(w * t);
    f[2 * i + 1] = std::cos(w * t);
  }
  return f;
}

/// Network input [x; tau(t)].
inline Vec feature_input(const Vec& x, double t, int m) {
  Vec in(x.size() + 2 * m);
  in.head(x.size()) = x;
  in.tail(2 * m) = time_features(t, m);
  return in;
}

struct FlowPair {
  Vec x_t;
  Vec target;
};

inline FlowPair fm_pair(const Vec& x0, const Vec& x1, double t) {
  if (!(t >= 0.0 && t <= 1.0)) throw DomainError("fm_pair: t must lie in [0,1]");
  if (x0.size() != x1.size()) throw ShapeError("fm_pair: x0 and x1 dimensions differ");
  return {(1.0 - t) * x0 + t * x1, x1 - x0};
}

struct Expert {
  DenseNet net;
  int cluster_id = 0;
  std::uint64_t train_config_hash = 0;
  int time_features = 0;

  int dim() const { return net.output_dim(); }

  void validate() const {
    net.validate();
    if (net.input_dim() != net.output_dim() + 2 * time_features)
      throw ShapeError("Expert: net input dim must equal d + 2m");
  }
};

struct ExpertEnsemble {
  std::vector<Expert> experts;
  int d = 0;

  int K() const { return static_cast<int>(experts.size()); }

  void validate() const {
    if (experts.empty()) throw ConfigError("ExpertEnsemble is empty");
    const int m = experts.front().time_features;
    for (std::size_t k = 0; k < experts.size(); ++k) {
      const auto& e = experts[k];
      e.validate();
      if (e.cluster_id != static_cast<int>(k)) throw ConfigError("ExpertEnsemble: cluster ids must be 0..K-1 in order");
      if (e.dim() != d || e.time_features != m) throw ConfigError("ExpertEnsemble: experts must share d and m");
    }
  }
};

/// Per-step training record. rows_read/max_row audit which partition rows
/// the optimiser touched.
struct TrainLog {
  std::vector<double> loss;
  std::uint64_t rows_read = 0;
  Eigen::Index max_row = -1;
};

inline Expert train_expert(const Mat& cluster_points, const TrainConfig& cfg, int cluster_id, TrainLog* log = nullptr) {
  cfg.validate();
  const Eigen::Index n = cluster_points.rows();
  const int d = static_cast<int>(cluster_points.cols());
  if (n < 1) throw ConfigError("train_expert: empty cluster " + std::to_string(cluster_id));

  std::vector<int> dims{d + 2 * cfg.m};
  dims.insert(dims.end(), cfg.hidden_dims.begin(), cfg.hidden_dims.end());
  dims.push_back(d);
  Expert e;
  e.net = DenseNet::random(dims, derive_seed(cfg.seed, "expert-init"));
  e.cluster_id = cluster_id;
  e.train_config_hash = cfg.hash();
  e.time_features = cfg.m;

  Adam opt(e.net, cfg.adam());
  Stream rng(derive_seed(cfg.seed, "expert-batches"));
  const int B = cfg.batch;
  Mat inputs(d + 2 * cfg.m, B);
  Mat targets(d, B);
  for (int step = 0; step < cfg.steps; ++step) {
    for (int b = 0; b < B; ++b) {
      const auto row = static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(n)));
      if (log) {
        ++log->rows_read;
        log->max_row = std::max(log->max_row, row);
      }
      const double t = rng.uniform();
      Vec x1(d);
      for (int j = 0; j < d; ++j) x1[j] = rng.normal();
      const Vec x0 = cluster_points.row(row).transpose();
      inputs.col(b).head(d) = (1.0 - t) * x0 + t * x1;
      inputs.col(b).tail(2 * cfg.m) = time_features(t, cfg.m);
      targets.col(b) = x1 - x0;
    }
    const BatchTape tape = net_forward_batch(e.net, inputs);
    const Mat resid = tape.output() - targets;
    const double loss = resid.squaredNorm() / B;
    if (!std::isfinite(loss))
      throw TrainingDiverged("expert " + std::to_string(cluster_id) + " training diverged at step " + std::to_string(step), step);
    if (log) log->loss.push_back(loss);
    opt.step(e.net, net_backward_batch(e.net, tape, (2.0 / B) * resid));
  }
  return e;
}

inline Vec expert_velocity(const Expert& e, const Vec& x, double t) {
  if (x.size() != e.dim())
    throw ShapeError("expert_velocity: expected dimension " + std::to_string(e.dim()) + ", got " + std::to_string(x.size()));
  return net_forward(e.net, feature_input(x, t, e.time_features));
}

/// Velocities of every expert, ordered by cluster id.
inline std::vector<Vec> ensemble_velocities(const ExpertEnsemble& ens, const Vec& x, double t) {
  std::vector<Vec> out;
  out.reserve(ens.experts.size());
  for (const auto& e : ens.experts) out.push_back(expert_velocity(e, x, t));
  return out;
}

/// Jacobian of the expert velocity with respect to x at fixed t.
inline LinearMapOracle expert_jacobian(const Expert& e, const Vec& x, double t) {
  const int d = e.dim();
  auto in = std::make_shared<Vec>(feature_input(x, t, e.time_features));
  const DenseNet* net = &e.net;
  return {d,
          [net, in, d](const Vec& u) -> Vec {
            Vec tangent = Vec::Zero(in->size());
            tangent.head(d) = u;
            return net_jvp(*net, *in, tangent);
          },
          [net, in, d](const Vec& w) -> Vec { return net_vjp(*net, *in, w).grad_input.head(d); }};
}

/// Trains one expert per label of `ds`; expert k only ever sees rows labelled k.
inline ExpertEnsemble train_ensemble(const Dataset& ds, const TrainConfig& base, int workers = 1,
                                     std::vector<TrainLog>* logs = nullptr) {
  ExpertEnsemble ens;
  ens.d = ds.d;
  ens.experts.resize(static_cast<std::size_t>(ds.K));
  std::vector<TrainLog> local(static_cast<std::size_t>(ds.K));
  parallel_for(static_cast<std::size_t>(ds.K), workers, [&](std::size_t k) {
    TrainConfig cfg = base;
    cfg.seed = derive_seed(base.seed, "expert", k);
    ens.experts[k] = train_expert(ds.cluster_points(static_cast<int>(k)), cfg, static_cast<int>(k), &local[k]);
  });
  if (logs) *logs = std::move(local);
  ens.validate();
  return ens;
}

}  // namespace ddmlab
