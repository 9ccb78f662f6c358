#pragma once

// Trajectory diagnostics: Jacobian sensitivity of the routed field, step
// refinement disagreement, local truncation error, expert disagreement,
// velocity alignment, cluster ranks, switching scores and failure flags.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "ddmlab/dataworld.hpp"
#include "ddmlab/errors.hpp"
#include "ddmlab/flowexperts.hpp"
#include "ddmlab/numcore.hpp"
#include "ddmlab/router.hpp"
#include "ddmlab/sampler.hpp"
#include "ddmlab/stats.hpp"

namespace ddmlab {

// ---------------------------------------------------------------------------
// Jacobian of the routed field on its local smooth branch.
//
// With the selected set S frozen, w_S = softmax(z_S / T) and
//   J v = sum_k w_k J v_k  +  sum_k v_k (grad w_k)^T,
//   d w_S = (1/T) (diag(w_S) - w_S w_S^T) d z_S.
// Because sum_k d w_k = 0 the router term can also be written with v_k
// replaced by v_k - v_bar.

enum class JacobianMode { FullField, ExpertTermOnly };

inline std::string to_string(JacobianMode m) { return m == JacobianMode::FullField ? "full-field" : "expert-term"; }

struct RoutedJacobian {
  LinearMapOracle expert_term;
  LinearMapOracle router_term;
  LinearMapOracle router_term_recentered;
  LinearMapOracle full;
};

inline RoutedJacobian routed_jacobian(const ExpertEnsemble& ens, const Router& router, const RoutingPolicy& policy,
                                      const RoutingDecision& decision, const Vec& x, double t) {
  struct State {
    const ExpertEnsemble* ens;
    const Router* router;
    int d;
    double inv_temp;
    bool weights_vary;
    std::vector<int> sel;
    std::vector<double> w;
    std::vector<Vec> v;        // velocities of selected experts
    std::vector<Vec> v_centered;
    std::vector<Vec> expert_in;
    Vec router_in;
  };
  auto s = std::make_shared<State>();
  s->ens = &ens;
  s->router = &router;
  s->d = static_cast<int>(x.size());
  s->inv_temp = 1.0 / policy.temperature;
  s->sel = decision.selected;
  double sel_prob_mass = 0.0;
  for (int k : s->sel) sel_prob_mass += decision.probs[k];
  // Uniform fallback of MisalignedTopK does not depend on the logits.
  s->weights_vary = !(policy.kind == RoutingPolicy::Kind::MisalignedTopK && sel_prob_mass < 1e-12);
  Vec vbar = Vec::Zero(x.size());
  for (int k : s->sel) {
    const auto& e = ens.experts[static_cast<std::size_t>(k)];
    s->w.push_back(decision.weights[k]);
    s->expert_in.push_back(feature_input(x, t, e.time_features));
    s->v.push_back(net_forward(e.net, s->expert_in.back()));
    vbar += decision.weights[k] * s->v.back();
  }
  for (const auto& vk : s->v) s->v_centered.push_back(vk - vbar);
  s->router_in = feature_input(x, t, router.m);

  auto expert_apply = [s](const Vec& u) -> Vec {
    Vec tangent_pad;
    Vec out = Vec::Zero(s->d);
    for (std::size_t i = 0; i < s->sel.size(); ++i) {
      tangent_pad = Vec::Zero(s->expert_in[i].size());
      tangent_pad.head(s->d) = u;
      out += s->w[i] * net_jvp(s->ens->experts[static_cast<std::size_t>(s->sel[i])].net, s->expert_in[i], tangent_pad);
    }
    return out;
  };
  auto expert_adjoint = [s](const Vec& c) -> Vec {
    Vec out = Vec::Zero(s->d);
    for (std::size_t i = 0; i < s->sel.size(); ++i)
      out += s->w[i] * net_vjp(s->ens->experts[static_cast<std::size_t>(s->sel[i])].net, s->expert_in[i], c).grad_input.head(s->d);
    return out;
  };

  // d w restricted to S from a logit tangent.
  auto dweights = [s](const Vec& dz) {
    std::vector<double> dw(s->sel.size(), 0.0);
    if (!s->weights_vary) return dw;
    double wdz = 0.0;
    for (std::size_t i = 0; i < s->sel.size(); ++i) wdz += s->w[i] * dz[s->sel[i]];
    for (std::size_t i = 0; i < s->sel.size(); ++i) dw[i] = s->inv_temp * s->w[i] * (dz[s->sel[i]] - wdz);
    return dw;
  };
  auto make_router = [s, dweights](bool centered) {
    auto vel = [s, centered](std::size_t i) -> const Vec& { return centered ? s->v_centered[i] : s->v[i]; };
    auto apply = [s, dweights, vel](const Vec& u) -> Vec {
      Vec tangent = Vec::Zero(s->router_in.size());
      tangent.head(s->d) = u;
      const Vec dz = net_jvp(s->router->net, s->router_in, tangent);
      const auto dw = dweights(dz);
      Vec out = Vec::Zero(s->d);
      for (std::size_t i = 0; i < s->sel.size(); ++i) out += dw[i] * vel(i);
      return out;
    };
    auto adjoint = [s, vel](const Vec& c) -> Vec {
      if (!s->weights_vary) return Vec::Zero(s->d);
      // a_i = <v_i, c>; g_z = (1/T)(diag(w) - w w^T) a on S, zero elsewhere.
      double wa = 0.0;
      std::vector<double> a(s->sel.size());
      for (std::size_t i = 0; i < s->sel.size(); ++i) {
        a[i] = vel(i).dot(c);
        wa += s->w[i] * a[i];
      }
      Vec gz = Vec::Zero(s->router->K());
      for (std::size_t i = 0; i < s->sel.size(); ++i) gz[s->sel[i]] = s->inv_temp * s->w[i] * (a[i] - wa);
      return net_vjp(s->router->net, s->router_in, gz).grad_input.head(s->d);
    };
    return LinearMapOracle{s->d, apply, adjoint};
  };

  RoutedJacobian j;
  j.expert_term = {s->d, expert_apply, expert_adjoint};
  j.router_term = make_router(false);
  j.router_term_recentered = make_router(true);
  auto rt = j.router_term;
  j.full = {s->d, [expert_apply, rt](const Vec& u) -> Vec { return expert_apply(u) + rt.apply(u); },
            [expert_adjoint, rt](const Vec& c) -> Vec { return expert_adjoint(c) + rt.apply_adjoint(c); }};
  return j;
}

// ---------------------------------------------------------------------------

struct LeffStep {
  int n = 0;
  double t = 0.0;
  double norm = 0.0;
  bool converged = true;
};

struct LeffRecord {
  std::vector<LeffStep> per_step_norms;
  double leff = 0.0;
  JacobianMode mode = JacobianMode::FullField;
  int stride = 1;
};

/// Max over every stride-th recorded state of the routed-field Jacobian
/// spectral norm, with each state's recorded selection frozen. Every state
/// starts power iteration from the same vector (cfg.seed), so equal Jacobians
/// give equal estimates.
inline LeffRecord empirical_leff(const ExpertEnsemble& ens, const Router& router, const RoutingPolicy& policy,
                                 const Trajectory& traj, JacobianMode mode = JacobianMode::FullField, int stride = 1,
                                 const PowerIterConfig& cfg = {}) {
  if (stride < 1) throw ConfigError("empirical_leff: stride must be >= 1");
  if (traj.decisions.size() != static_cast<std::size_t>(traj.N) + 1)
    throw ConfigError("empirical_leff: trajectory must be recorded with decisions");
  LeffRecord rec;
  rec.mode = mode;
  rec.stride = stride;
  for (int n = 0; n <= traj.N; n += stride) {
    const double t = traj.times[static_cast<std::size_t>(n)];
    const auto jac = routed_jacobian(ens, router, policy, traj.decisions[static_cast<std::size_t>(n)], traj.state(n), t);
    const auto est = spectral_norm(mode == JacobianMode::FullField ? jac.full : jac.expert_term, cfg);
    rec.per_step_norms.push_back({n, t, est.estimate, est.converged});
    rec.leff = std::max(rec.leff, est.estimate);
  }
  return rec;
}

struct LeffLevel {
  int N = 0;
  double h = 0.0;
  double leff = 0.0;
};

struct LeffConsistency {
  std::vector<LeffLevel> levels;
  std::vector<double> gaps;  // |L(h) - L(h/2)| between consecutive levels
};

inline LeffConsistency leff_consistency(const ExpertEnsemble& ens, const Router& router, const RoutingPolicy& policy,
                                        const Vec& x1, const std::vector<int>& N_list,
                                        JacobianMode mode = JacobianMode::FullField, const PowerIterConfig& cfg = {},
                                        std::uint64_t seed = 0) {
  for (std::size_t i = 1; i < N_list.size(); ++i)
    if (N_list[i] <= N_list[i - 1]) throw ConfigError("leff_consistency: N_list must be increasing");
  LeffConsistency out;
  for (int N : N_list) {
    SamplerConfig sc;
    sc.N = N;
    const auto tr = sample_trajectory(ens, router, policy, x1, sc, seed);
    out.levels.push_back({N, 1.0 / N, empirical_leff(ens, router, policy, tr, mode, 1, cfg).leff});
  }
  for (std::size_t i = 1; i < out.levels.size(); ++i) out.gaps.push_back(std::abs(out.levels[i - 1].leff - out.levels[i].leff));
  return out;
}

/// Dimension-normalised endpoint distance ||a - b|| / sqrt(d).
inline double delta_refine(const Vec& a, const Vec& b) {
  if (a.size() != b.size()) throw ShapeError("delta_refine: dimension mismatch");
  return (a - b).norm() / std::sqrt(static_cast<double>(a.size()));
}

struct RefineRecord {
  double delta_refine = 0.0;
  int N = 0;
  std::string distance_kind = "normalized-l2";
};

inline RefineRecord refine_record(const RefinementPair& pair, int N) { return {delta_refine(pair.coarse, pair.fine), N}; }

struct LocalErrorRecord {
  double eps_local = 0.0;
  double h = 0.0;
  Vec x;
  double t = 0.0;
  std::optional<double> scaling_ratio;
};

/// One Heun step of size h against ten Heun sub-steps of size h/10.
template <class Field>
LocalErrorRecord local_truncation_error(Field&& field, const Vec& x, double t, double h) {
  if (t - h < -1e-12) throw DomainError("local_truncation_error: need t - h >= 0");
  const Vec coarse = heun_step(field, x, t, h);
  Vec fine = x;
  const double sub = h / 10.0;
  for (int i = 0; i < 10; ++i) {
    const double ti = t - i * sub;
    const double tn = i == 9 ? t - h : t - (i + 1) * sub;
    fine = detail::heun_to(field, fine, ti, sub, tn);
  }
  LocalErrorRecord r;
  r.eps_local = (coarse - fine).norm();
  r.h = h;
  r.x = x;
  r.t = t;
  return r;
}

/// Local error at h with scaling_ratio = eps(h) / eps(h/2).
template <class Field>
LocalErrorRecord local_error_with_scaling(Field&& field, const Vec& x, double t, double h) {
  auto r = local_truncation_error(field, x, t, h);
  const auto half = local_truncation_error(field, x, t, h / 2);
  r.scaling_ratio = half.eps_local > 0.0 ? r.eps_local / half.eps_local : std::numeric_limits<double>::infinity();
  return r;
}

struct DecompositionRecord {
  double expert_term_norm = 0.0;
  double router_term_norm = 0.0;
  std::string dominant;
};

inline DecompositionRecord jacobian_decomposition(const ExpertEnsemble& ens, const Router& router, const RoutingPolicy& policy,
                                                  const Vec& x, double t, const PowerIterConfig& cfg = {},
                                                  Stream* stream = nullptr) {
  const auto rv = routed_velocity(ens, router, policy, x, t, stream);
  const auto jac = routed_jacobian(ens, router, policy, rv.decision, x, t);
  DecompositionRecord r;
  r.expert_term_norm = spectral_norm(jac.expert_term, cfg).estimate;
  r.router_term_norm = spectral_norm(jac.router_term, cfg).estimate;
  r.dominant = r.router_term_norm > r.expert_term_norm ? "router" : "expert";
  return r;
}

// ---------------------------------------------------------------------------

/// Mean pairwise distance between expert velocities.
inline double pairwise_disagreement(const std::vector<Vec>& v) {
  const std::size_t K = v.size();
  if (K < 2) return 0.0;
  double s = 0.0;
  for (std::size_t i = 0; i < K; ++i)
    for (std::size_t j = i + 1; j < K; ++j) s += (v[i] - v[j]).norm();
  return s / (0.5 * static_cast<double>(K) * static_cast<double>(K - 1));
}

/// Trapezoid integral over the decreasing time grid, oriented positively.
inline double integrate_over_time(const std::vector<double>& times, const std::vector<double>& values) {
  double s = 0.0;
  for (std::size_t n = 0; n + 1 < values.size(); ++n) s += (times[n] - times[n + 1]) * 0.5 * (values[n] + values[n + 1]);
  return s;
}

struct DisagreementRecord {
  std::vector<std::pair<double, double>> per_step_D;  // (t_n, D)
  double D_int = 0.0;
};

inline DisagreementRecord disagreement(const Trajectory& traj) {
  if (traj.velocities_all.size() != static_cast<std::size_t>(traj.N) + 1)
    throw ConfigError("disagreement: trajectory must be recorded with all expert velocities");
  DisagreementRecord r;
  std::vector<double> D;
  for (int n = 0; n <= traj.N; ++n) {
    D.push_back(pairwise_disagreement(traj.velocities_all[static_cast<std::size_t>(n)]));
    r.per_step_D.emplace_back(traj.times[static_cast<std::size_t>(n)], D.back());
  }
  r.D_int = integrate_over_time(traj.times, D);
  return r;
}

struct ExpertAlignment {
  int k = 0;
  double cosine = std::numeric_limits<double>::quiet_NaN();
  double theta_deg = std::numeric_limits<double>::quiet_NaN();
  bool defined = false;
  bool selected = false;
};

struct AlignmentRecord {
  std::vector<ExpertAlignment> per_expert;
  std::vector<int> selected;
  bool blended_defined = true;
};

/// Cosine between each expert velocity and the blended velocity, and the
/// corresponding angle in degrees. Zero-norm vectors leave entries undefined.
inline AlignmentRecord alignment(const std::vector<Vec>& velocities, const Vec& blended, const std::vector<int>& selected) {
  AlignmentRecord r;
  r.selected = selected;
  const double nb = blended.norm();
  r.blended_defined = nb > 0.0;
  for (std::size_t k = 0; k < velocities.size(); ++k) {
    ExpertAlignment a;
    a.k = static_cast<int>(k);
    a.selected = std::find(selected.begin(), selected.end(), a.k) != selected.end();
    const double nk = velocities[k].norm();
    if (nk > 0.0 && nb > 0.0) {
      a.cosine = std::clamp(velocities[k].dot(blended) / (nk * nb), -1.0, 1.0);
      a.theta_deg = std::acos(a.cosine) * 180.0 / std::numbers::pi;
      a.defined = true;
    }
    r.per_expert.push_back(a);
  }
  return r;
}

// ---------------------------------------------------------------------------

struct ProbeRank {
  double t = 0.0;
  int step = 0;
  double mean_rank = 0.0;       // mean rank of the selected experts' clusters
  bool top2_match = false;      // some selected cluster ranks <= 2
  double top2_fraction = 0.0;   // share of selected clusters ranked <= 2
};

struct ClusterRankMetrics {
  std::vector<ProbeRank> probes;
  double mean_rank = 0.0;
  double top2_match_rate = 0.0;
  double top2_fraction = 0.0;
};

inline const std::vector<double>& default_rank_probes() {
  static const std::vector<double> probes{0.3, 0.5, 0.7};
  return probes;
}

inline int nearest_step(const Trajectory& traj, double t) {
  int best = 0;
  for (int n = 1; n <= traj.N; ++n)
    if (std::abs(traj.times[static_cast<std::size_t>(n)] - t) < std::abs(traj.times[static_cast<std::size_t>(best)] - t)) best = n;
  return best;
}

inline ClusterRankMetrics aggregate_ranks(std::vector<ProbeRank> probes) {
  ClusterRankMetrics m;
  m.probes = std::move(probes);
  if (m.probes.empty()) return m;
  for (const auto& p : m.probes) {
    m.mean_rank += p.mean_rank;
    m.top2_match_rate += p.top2_match ? 1.0 : 0.0;
    m.top2_fraction += p.top2_fraction;
  }
  const double n = static_cast<double>(m.probes.size());
  m.mean_rank /= n;
  m.top2_match_rate /= n;
  m.top2_fraction /= n;
  return m;
}

inline ClusterRankMetrics cluster_rank_metrics(const Trajectory& traj, const Mat& centroids,
                                               const std::vector<double>& t_probes = default_rank_probes()) {
  if (traj.decisions.empty()) throw ConfigError("cluster_rank_metrics: trajectory has no recorded decisions");
  std::vector<ProbeRank> probes;
  for (double tp : t_probes) {
    ProbeRank p;
    p.step = nearest_step(traj, tp);
    p.t = traj.times[static_cast<std::size_t>(p.step)];
    const auto cr = cluster_rank(traj.state(p.step), centroids);
    const auto& sel = traj.decisions[static_cast<std::size_t>(p.step)].selected;
    int close = 0;
    for (int k : sel) {
      const int r = cr.ranks[static_cast<std::size_t>(k)];
      p.mean_rank += r;
      close += r <= 2;
    }
    p.mean_rank /= static_cast<double>(sel.size());
    p.top2_match = close > 0;
    p.top2_fraction = static_cast<double>(close) / static_cast<double>(sel.size());
    probes.push_back(p);
  }
  return aggregate_ranks(std::move(probes));
}

// ---------------------------------------------------------------------------

inline constexpr double kSwitchEps = 1e-3;

struct SwitchingStep {
  double t = 0.0;
  double m_p = 0.0;
  double m_z = 0.0;
  double g = 0.0;
  double S_switch = 0.0;
};

struct SwitchingRecord {
  std::vector<SwitchingStep> per_step;
  double S_eff = 0.0;
  double S_int = 0.0;
  double eps_sw = kSwitchEps;
  double g_max = 0.0;
  double min_margin_p = 1.0;
};

inline double switching_score(double g, double m_z, double eps_sw = kSwitchEps) { return g / (m_z + eps_sw); }

inline SwitchingRecord switching_metrics(const Trajectory& traj) {
  if (traj.decisions.size() != static_cast<std::size_t>(traj.N) + 1 || traj.velocities_all.size() != traj.decisions.size())
    throw ConfigError("switching_metrics: trajectory needs decisions and all expert velocities");
  SwitchingRecord r;
  std::vector<double> S;
  for (std::size_t n = 0; n < traj.decisions.size(); ++n) {
    const auto& dec = traj.decisions[n];
    if (dec.logits.size() < 2) throw ConfigError("switching_metrics: needs K >= 2");
    const auto order = detail::descending_order(dec.logits);
    const int k1 = order[0], k2 = order[1];
    SwitchingStep st;
    st.t = traj.times[n];
    st.m_p = dec.probs[k1] - dec.probs[k2];
    st.m_z = dec.logits[k1] - dec.logits[k2];
    st.g = (traj.velocities_all[n][static_cast<std::size_t>(k1)] - traj.velocities_all[n][static_cast<std::size_t>(k2)]).norm();
    st.S_switch = switching_score(st.g, st.m_z, r.eps_sw);
    r.S_eff = std::max(r.S_eff, st.S_switch);
    r.g_max = std::max(r.g_max, st.g);
    r.min_margin_p = std::min(r.min_margin_p, st.m_p);
    S.push_back(st.S_switch);
    r.per_step.push_back(st);
  }
  r.S_int = integrate_over_time(traj.times, S);
  return r;
}

// ---------------------------------------------------------------------------

struct FailureThresholds {
  double entropy_nats = 1.5;
  double delta_refine = 0.1;
  double leff = 50.0;

  /// The absolute constants used for the 8-expert Paris system.
  static FailureThresholds paper8() { return {1.5, 0.1, 50.0}; }

  /// Percentile protocol: 99th percentile of Top-2 delta_refine and L_eff,
  /// entropy threshold 0.72 ln K.
  static FailureThresholds from_top2(std::span<const double> top2_delta_refine, std::span<const double> top2_leff, int K) {
    return {0.72 * std::log(static_cast<double>(K)), stats::percentile(top2_delta_refine, 0.99), stats::percentile(top2_leff, 0.99)};
  }
};

struct FailureFlags {
  bool routing_uncertain = false;
  bool poor_convergence = false;
  bool high_leff = false;
  FailureThresholds thresholds;
};

inline FailureFlags failure_classify(double leff, double delta_refine_value, double max_entropy, const FailureThresholds& th) {
  if (!(th.entropy_nats > 0.0 && th.delta_refine > 0.0 && th.leff > 0.0)) throw ConfigError("failure thresholds must be positive");
  return {max_entropy > th.entropy_nats, delta_refine_value > th.delta_refine, leff > th.leff, th};
}

inline double max_entropy(const Trajectory& traj) {
  double m = 0.0;
  for (const auto& d : traj.decisions) m = std::max(m, d.entropy_nats);
  return m;
}

// ---------------------------------------------------------------------------

struct ConvergenceLevel {
  int N = 0;
  double h = 0.0;
  double exceed_fraction = 0.0;
  double mean_error = 0.0;
};

/// Fraction of noise draws whose endpoint at each N lies farther than eps
/// (in ||.||/sqrt(d)) from the reference endpoint at 4 * max(N_list) steps.
/// `endpoint(x1, N, index)` integrates one trajectory.
inline std::vector<ConvergenceLevel> convergence_probe(const std::function<Vec(const Vec&, int, std::size_t)>& endpoint,
                                                       const std::vector<Vec>& noise_batch, double eps,
                                                       const std::vector<int>& N_list) {
  if (N_list.empty()) throw ConfigError("convergence_probe: empty N_list");
  for (std::size_t i = 1; i < N_list.size(); ++i)
    if (N_list[i] <= N_list[i - 1]) throw ConfigError("convergence_probe: N_list must be increasing");
  const int ref_N = 4 * N_list.back();
  std::vector<Vec> ref;
  for (std::size_t i = 0; i < noise_batch.size(); ++i) ref.push_back(endpoint(noise_batch[i], ref_N, i));
  std::vector<ConvergenceLevel> out;
  for (int N : N_list) {
    ConvergenceLevel lv;
    lv.N = N;
    lv.h = 1.0 / N;
    std::size_t exceed = 0;
    for (std::size_t i = 0; i < noise_batch.size(); ++i) {
      const double e = delta_refine(endpoint(noise_batch[i], N, i), ref[i]);
      lv.mean_error += e;
      exceed += e > eps;
    }
    if (!noise_batch.empty()) {
      lv.exceed_fraction = static_cast<double>(exceed) / static_cast<double>(noise_batch.size());
      lv.mean_error /= static_cast<double>(noise_batch.size());
    }
    out.push_back(lv);
  }
  return out;
}

}  // namespace ddmlab
