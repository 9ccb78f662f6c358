#pragma once

// Post-hoc router and the routing policies that turn its logits into
// sparse convex weights over experts.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ddmlab/dataworld.hpp"
#include "ddmlab/errors.hpp"
#include "ddmlab/flowexperts.hpp"
#include "ddmlab/numcore.hpp"
#include "ddmlab/optim.hpp"
#include "ddmlab/rng.hpp"

namespace ddmlab {

struct Router {
  DenseNet net;
  int m = 0;

  int K() const { return net.output_dim(); }
  int dim() const { return net.input_dim() - 2 * m; }

  Vec logits(const Vec& x, double t) const {
    if (x.size() != dim()) throw ShapeError("router: expected dimension " + std::to_string(dim()));
    return net_forward(net, feature_input(x, t, m));
  }
};

struct RoutingPolicy {
  enum class Kind { Full, TopK, TopP, MisalignedTopK, WeightClip };

  Kind kind = Kind::Full;
  int k = 1;
  double p = 1.0;
  std::uint64_t stream_seed = 0;
  double temperature = 1.0;

  static RoutingPolicy full(double temperature = 1.0) { return {Kind::Full, 0, 1.0, 0, temperature}; }
  static RoutingPolicy top_k(int k, double temperature = 1.0) { return {Kind::TopK, k, 1.0, 0, temperature}; }
  static RoutingPolicy top_p(double p, double temperature = 1.0) { return {Kind::TopP, 0, p, 0, temperature}; }
  static RoutingPolicy misaligned_top_k(int k, std::uint64_t seed) { return {Kind::MisalignedTopK, k, 1.0, seed, 1.0}; }
  static RoutingPolicy weight_clip() { return {Kind::WeightClip, 0, 1.0, 0, 1.0}; }

  void validate(int K) const {
    if (!(temperature > 0.0) || !std::isfinite(temperature)) throw ConfigError("RoutingPolicy: temperature must be finite and > 0");
    if ((kind == Kind::TopK || kind == Kind::MisalignedTopK) && (k < 1 || k > K))
      throw ConfigError("RoutingPolicy: k must lie in [1, K]");
    if (kind == Kind::TopP && !(p > 0.0 && p <= 1.0)) throw ConfigError("RoutingPolicy: p must lie in (0, 1]");
  }

  std::string name() const {
    std::string base;
    switch (kind) {
      case Kind::Full: base = "full"; break;
      case Kind::TopK: base = "top" + std::to_string(k); break;
      case Kind::TopP: {
        char buf[32];
        std::snprintf(buf, sizeof buf, "topp%g", p);
        base = buf;
        break;
      }
      case Kind::MisalignedTopK: base = "misaligned-top" + std::to_string(k); break;
      case Kind::WeightClip: base = "weight-clip"; break;
    }
    if (temperature != 1.0) {
      char buf[32];
      std::snprintf(buf, sizeof buf, "@T%g", temperature);
      base += buf;
    }
    return base;
  }

  /// Accepts full, top<k>, topp<p>, misaligned-top<k>, weight-clip, each
  /// optionally suffixed with @T<temperature>.
  static RoutingPolicy parse(const std::string& text) {
    std::string s = text;
    double temp = 1.0;
    if (auto at = s.find("@T"); at != std::string::npos) {
      temp = std::stod(s.substr(at + 2));
      s = s.substr(0, at);
    }
    auto num_after = [&](std::size_t prefix) -> std::string { return s.substr(prefix); };
    RoutingPolicy pol;
    try {
      if (s == "full") pol = full();
      else if (s == "weight-clip") pol = weight_clip();
      else if (s.rfind("misaligned-top", 0) == 0) pol = misaligned_top_k(std::stoi(num_after(14)), 0);
      else if (s.rfind("topp", 0) == 0) pol = top_p(std::stod(num_after(4)));
      else if (s.rfind("top", 0) == 0 && s.size() > 3) pol = top_k(std::stoi(num_after(3)));
      else throw ConfigError("");
    } catch (const std::exception&) {
      throw ConfigError("unknown routing policy '" + text + "'; valid policies: " + valid_names());
    }
    pol.temperature = temp;
    return pol;
  }

  static std::string valid_names() { return "full, top<k>, topp<p>, misaligned-top<k>, weight-clip (optional suffix @T<temperature>)"; }
};

struct RoutingDecision {
  Vec logits;
  Vec probs;
  Vec weights;
  std::vector<int> selected;  // ascending expert indices
  double entropy_nats = 0.0;  // entropy of probs
};

/// -sum p ln p with 0 ln 0 = 0.
inline double routing_entropy(std::span<const double> p) {
  double h = 0.0;
  for (double v : p)
    if (v > 0.0) h -= v * std::log(v);
  return std::max(0.0, h);
}

inline double routing_entropy(const Vec& p) { return routing_entropy(std::span<const double>(p.data(), static_cast<std::size_t>(p.size()))); }

inline Vec softmax(const Vec& z, double temperature = 1.0) {
  const Vec s = z / temperature;
  const double mx = s.maxCoeff();
  Vec e = (s.array() - mx).exp().matrix();
  return e / e.sum();
}

namespace detail {

/// Indices sorted by descending value, lower index first among ties.
inline std::vector<int> descending_order(const Vec& v) {
  std::vector<int> idx(static_cast<std::size_t>(v.size()));
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) { return v[a] > v[b]; });
  return idx;
}

inline void renormalize_over(RoutingDecision& d, std::vector<int> sel) {
  std::sort(sel.begin(), sel.end());
  double mass = 0.0;
  for (int k : sel) mass += d.probs[k];
  d.weights = Vec::Zero(d.probs.size());
  for (int k : sel) d.weights[k] = d.probs[k] / mass;
  d.selected = std::move(sel);
}

inline double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace detail

/// Applies a policy to given logits. `aux` holds per-expert Jacobian norms
/// (WeightClip only); `stream` supplies the random draws for MisalignedTopK.
inline RoutingDecision apply_policy(const Vec& logits, const RoutingPolicy& policy,
                                    std::optional<std::span<const double>> aux = std::nullopt,
                                    Stream* stream = nullptr) {
  const int K = static_cast<int>(logits.size());
  policy.validate(K);
  RoutingDecision d;
  d.logits = logits;
  d.probs = softmax(logits, policy.temperature);

  using Kind = RoutingPolicy::Kind;
  switch (policy.kind) {
    case Kind::Full: {
      d.weights = d.probs;
      d.selected.resize(static_cast<std::size_t>(K));
      std::iota(d.selected.begin(), d.selected.end(), 0);
      break;
    }
    case Kind::TopK: {
      auto order = detail::descending_order(d.probs);
      order.resize(static_cast<std::size_t>(policy.k));
      detail::renormalize_over(d, std::move(order));
      break;
    }
    case Kind::TopP: {
      const auto order = detail::descending_order(d.probs);
      std::vector<int> keep;
      double cum = 0.0;
      for (int k : order) {
        keep.push_back(k);
        cum += d.probs[k];
        if (cum >= policy.p) break;
      }
      detail::renormalize_over(d, std::move(keep));
      break;
    }
    case Kind::MisalignedTopK: {
      if (!stream) throw ConfigError("MisalignedTopK routing needs a random stream");
      std::vector<int> pool(static_cast<std::size_t>(K));
      std::iota(pool.begin(), pool.end(), 0);
      for (int i = 0; i < policy.k; ++i) {
        const auto j = static_cast<std::size_t>(i) + static_cast<std::size_t>(stream->below(static_cast<std::uint64_t>(K - i)));
        std::swap(pool[static_cast<std::size_t>(i)], pool[j]);
      }
      pool.resize(static_cast<std::size_t>(policy.k));
      std::sort(pool.begin(), pool.end());
      double mass = 0.0;
      for (int k : pool) mass += d.probs[k];
      if (mass < 1e-12) {
        d.weights = Vec::Zero(K);
        for (int k : pool) d.weights[k] = 1.0 / policy.k;
        d.selected = std::move(pool);
      } else {
        detail::renormalize_over(d, std::move(pool));
      }
      break;
    }
    case Kind::WeightClip: {
      if (!aux || static_cast<int>(aux->size()) != K)
        throw ConfigError("WeightClip routing needs one Jacobian norm per expert");
      const double med = detail::median(std::vector<double>(aux->begin(), aux->end()));
      std::vector<int> keep;
      for (int k = 0; k < K; ++k)
        if ((*aux)[static_cast<std::size_t>(k)] < med) keep.push_back(k);
      if (keep.empty()) {
        d.weights = d.probs;
        d.selected.resize(static_cast<std::size_t>(K));
        std::iota(d.selected.begin(), d.selected.end(), 0);
      } else {
        detail::renormalize_over(d, std::move(keep));
      }
      break;
    }
  }
  // Uncertainty of the router distribution itself, before truncation.
  d.entropy_nats = routing_entropy(d.probs);
  return d;
}

inline RoutingDecision route(const Router& router, const RoutingPolicy& policy, const Vec& x, double t,
                             std::optional<std::span<const double>> aux = std::nullopt, Stream* stream = nullptr) {
  return apply_policy(router.logits(x, t), policy, aux, stream);
}

/// Spectral norms of every expert Jacobian with a fixed 5-iteration power method.
inline std::vector<double> expert_jacobian_norms(const ExpertEnsemble& ens, const Vec& x, double t, int iterations = 5) {
  std::vector<double> norms;
  norms.reserve(ens.experts.size());
  for (std::size_t k = 0; k < ens.experts.size(); ++k)
    norms.push_back(spectral_norm(expert_jacobian(ens.experts[k], x, t), PowerIterConfig::fixed(iterations, derive_seed(0, "weight-clip", k))).estimate);
  return norms;
}

struct RoutedVelocity {
  Vec v;
  RoutingDecision decision;
};

/// Blend of the selected experts' velocities; only selected experts are evaluated.
inline RoutedVelocity routed_velocity(const ExpertEnsemble& ens, const Router& router, const RoutingPolicy& policy,
                                      const Vec& x, double t, Stream* stream = nullptr) {
  if (router.K() != ens.K()) throw ShapeError("routed_velocity: router and ensemble disagree on K");
  RoutedVelocity out;
  if (policy.kind == RoutingPolicy::Kind::WeightClip) {
    const auto norms = expert_jacobian_norms(ens, x, t);
    out.decision = route(router, policy, x, t, std::span<const double>(norms), stream);
  } else {
    out.decision = route(router, policy, x, t, std::nullopt, stream);
  }
  out.v = Vec::Zero(x.size());
  for (int k : out.decision.selected) out.v += out.decision.weights[k] * expert_velocity(ens.experts[static_cast<std::size_t>(k)], x, t);
  return out;
}

/// Same blend computed from precomputed velocities of all experts.
inline Vec blend(const RoutingDecision& decision, const std::vector<Vec>& velocities) {
  Vec v = Vec::Zero(velocities.front().size());
  for (int k : decision.selected) v += decision.weights[k] * velocities[static_cast<std::size_t>(k)];
  return v;
}

struct RouterLog {
  std::vector<double> loss;
  double accuracy_t0 = 0.0;
};

/// Cross-entropy classification of the cluster label from noisy states
/// x_t = (1 - t) x + t x1 with t ~ U[0,1], x1 ~ N(0, I).
inline Router train_router(const Dataset& ds, const TrainConfig& cfg, RouterLog* log = nullptr) {
  cfg.validate();
  if (ds.K < 1 || ds.size() < 1) throw ConfigError("train_router: empty dataset");
  for (int l : ds.labels)
    if (l < 0 || l >= ds.K) throw ConfigError("train_router: label out of range");
  const int d = ds.d;
  const int K = ds.K;
  std::vector<int> dims{d + 2 * cfg.m};
  dims.insert(dims.end(), cfg.hidden_dims.begin(), cfg.hidden_dims.end());
  dims.push_back(K);
  Router r{DenseNet::random(dims, derive_seed(cfg.seed, "router-init")), cfg.m};

  Adam opt(r.net, cfg.adam());
  Stream rng(derive_seed(cfg.seed, "router-batches"));
  const int B = cfg.batch;
  const auto n = static_cast<std::uint64_t>(ds.size());
  Mat inputs(d + 2 * cfg.m, B);
  std::vector<int> labels(static_cast<std::size_t>(B));
  for (int step = 0; step < cfg.steps; ++step) {
    for (int b = 0; b < B; ++b) {
      const auto row = static_cast<Eigen::Index>(rng.below(n));
      const double t = rng.uniform();
      Vec x1(d);
      for (int j = 0; j < d; ++j) x1[j] = rng.normal();
      inputs.col(b).head(d) = (1.0 - t) * ds.points.row(row).transpose() + t * x1;
      inputs.col(b).tail(2 * cfg.m) = time_features(t, cfg.m);
      labels[static_cast<std::size_t>(b)] = ds.labels[static_cast<std::size_t>(row)];
    }
    const BatchTape tape = net_forward_batch(r.net, inputs);
    const Mat& z = tape.output();
    Mat grad(K, B);
    double loss = 0.0;
    for (int b = 0; b < B; ++b) {
      const Vec p = softmax(z.col(b));
      const int y = labels[static_cast<std::size_t>(b)];
      loss -= std::log(std::max(p[y], std::numeric_limits<double>::min()));
      grad.col(b) = p;
      grad(y, b) -= 1.0;
    }
    loss /= B;
    if (!std::isfinite(loss)) throw TrainingDiverged("router training diverged at step " + std::to_string(step), step);
    if (log) log->loss.push_back(loss);
    opt.step(r.net, net_backward_batch(r.net, tape, grad / B));
  }

  if (log) {
    int correct = 0;
    for (Eigen::Index i = 0; i < ds.size(); ++i) {
      const Vec z = r.logits(ds.points.row(i).transpose(), 0.0);
      Eigen::Index arg = 0;
      z.maxCoeff(&arg);
      correct += static_cast<int>(arg) == ds.labels[static_cast<std::size_t>(i)];
    }
    log->accuracy_t0 = static_cast<double>(correct) / static_cast<double>(ds.size());
  }
  return r;
}

}  // namespace ddmlab
