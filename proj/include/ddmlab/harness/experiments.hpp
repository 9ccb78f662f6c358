#pragma once

// Experiment presets. Each returns a summary table (first), optional detail
// tables, and a JSON block of aggregates. Samples are processed in parallel
// but every result lands in its own slot, so output never depends on the
// worker count.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "ddmlab/diagnostics.hpp"
#include "ddmlab/harness/config.hpp"
#include "ddmlab/harness/io.hpp"
#include "ddmlab/harness/system.hpp"
#include "ddmlab/parallel.hpp"
#include "ddmlab/stats.hpp"

namespace ddmlab::harness {

inline constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

struct Lab {
  const LabConfig& cfg;
  const System& sys;
  int workers = 1;
};

struct ExperimentResult {
  std::string name;
  std::vector<Table> tables;
  json aggregates = json::object();
};

// ---------------------------------------------------------------------------
// Shared per-sample measurement.

struct SampleOptions {
  int N = 50;
  Solver solver = Solver::Heun;
  bool refine = true;
  bool leff = false;
  JacobianMode mode = JacobianMode::FullField;
  int stride = 1;
  bool all_experts = false;
  bool keep_trajectory = false;
};

struct SampleMetrics {
  Vec endpoint;
  double nll = kNaN;
  double dref = kNaN;
  double leff = kNaN;
  double max_entropy = 0.0;
  double mean_entropy = 0.0;
  double mean_selected = 0.0;
  std::optional<Trajectory> traj;
};

inline std::vector<SampleMetrics> run_samples(const Lab& lab, const RoutingPolicy& policy, const std::vector<Vec>& noise,
                                              const SampleOptions& opt, int leff_count = -1) {
  std::vector<SampleMetrics> out(noise.size());
  const auto& s = lab.sys;
  parallel_for(noise.size(), lab.workers, [&](std::size_t i) {
    SamplerConfig sc;
    sc.N = opt.N;
    sc.solver = opt.solver;
    sc.record_all_experts = opt.all_experts;
    auto tr = sample_trajectory(s.ens, s.router, policy, noise[i], sc, i);
    SampleMetrics m;
    m.endpoint = tr.endpoint();
    m.nll = mixture_nll(m.endpoint, s.ds.mixture_means);
    for (const auto& d : tr.decisions) {
      m.max_entropy = std::max(m.max_entropy, d.entropy_nats);
      m.mean_entropy += d.entropy_nats;
      m.mean_selected += static_cast<double>(d.selected.size());
    }
    m.mean_entropy /= static_cast<double>(tr.decisions.size());
    m.mean_selected /= static_cast<double>(tr.decisions.size());
    if (opt.refine) {
      SamplerConfig fine = sc;
      fine.N = 2 * opt.N;
      fine.record_decisions = false;
      fine.record_all_experts = false;
      m.dref = delta_refine(m.endpoint, sample_trajectory(s.ens, s.router, policy, noise[i], fine, i).endpoint());
    }
    if (opt.leff && (leff_count < 0 || static_cast<int>(i) < leff_count)) {
      PowerIterConfig pc;
      pc.seed = lab.cfg.power_seed(i);
      m.leff = empirical_leff(s.ens, s.router, policy, tr, opt.mode, opt.stride, pc).leff;
    }
    if (opt.keep_trajectory) m.traj = std::move(tr);
    out[i] = std::move(m);
  });
  return out;
}

template <class F>
std::vector<double> collect(const std::vector<SampleMetrics>& ms, F f) {
  std::vector<double> v;
  for (const auto& m : ms) {
    const double x = f(m);
    if (!std::isnan(x)) v.push_back(x);
  }
  return v;
}

inline double mean_or_nan(std::span<const double> v) { return v.empty() ? kNaN : stats::mean(v); }
inline double std_or_nan(std::span<const double> v) { return v.size() < 2 ? kNaN : stats::stddev(v); }

inline std::vector<RoutingPolicy> policies_of(const LabConfig& cfg, const std::vector<std::string>& names) {
  std::vector<RoutingPolicy> out;
  for (const auto& n : names) out.push_back(cfg.policy(n));
  return out;
}

inline std::vector<std::string> override_names(const LabConfig& cfg, const std::string& preset, std::vector<std::string> fallback) {
  const auto o = cfg.override_for(preset);
  return o.contains("policies") ? o["policies"].get<std::vector<std::string>>() : fallback;
}

inline int override_count(const LabConfig& cfg, const std::string& preset, int fallback) {
  return cfg.override_for(preset).value("samples", fallback);
}

// ---------------------------------------------------------------------------

inline ExperimentResult exp_dissociation(const Lab& lab) {
  const auto& cfg = lab.cfg;
  const int n = override_count(cfg, "dissociation", cfg.count(1000, false));
  const int nj = std::min(n, cfg.count(1000, true));
  const auto noise = noise_batch(cfg.master_seed, cfg.d, n);
  ExperimentResult r{"dissociation", {}, {}};
  Table summary{"summary", {"policy", "nll", "leff_mean", "leff_std", "dref_mean", "dref_std"}, {}};
  Table samples{"samples", {"policy", "sample", "nll", "dref", "leff", "max_entropy"}, {}};
  SampleOptions opt;
  opt.N = cfg.N;
  opt.solver = cfg.solver;
  opt.leff = true;
  for (const auto& p : policies_of(cfg, override_names(cfg, "dissociation", cfg.policies))) {
    const auto ms = run_samples(lab, p, noise, opt, nj);
    const auto nll = collect(ms, [](auto& m) { return m.nll; });
    const auto dref = collect(ms, [](auto& m) { return m.dref; });
    const auto leff = collect(ms, [](auto& m) { return m.leff; });
    summary.add({p.name(), stats::mean(nll), mean_or_nan(leff), std_or_nan(leff), stats::mean(dref), std_or_nan(dref)});
    for (std::size_t i = 0; i < ms.size(); ++i)
      samples.add({p.name(), static_cast<long long>(i), ms[i].nll, ms[i].dref, ms[i].leff, ms[i].max_entropy});
    r.aggregates[p.name()] = {{"nll", stats::mean(nll)}, {"leff_mean", mean_or_nan(leff)}, {"dref_mean", stats::mean(dref)}, {"n", n}, {"n_leff", leff.size()}};
  }
  r.tables = {summary, samples};
  return r;
}

inline ExperimentResult exp_cluster_rank(const Lab& lab) {
  const auto& cfg = lab.cfg;
  const int n = override_count(cfg, "cluster-rank", cfg.count(500, false));
  const auto noise = noise_batch(cfg.master_seed, cfg.d, n);
  ExperimentResult r{"cluster-rank", {}, {}};
  Table summary{"summary", {"policy", "mean_rank", "rank_std", "top2_match_rate", "top2_fraction"}, {}};
  for (const auto& p : policies_of(cfg, override_names(cfg, "cluster-rank", {"top1", "top2", "full"}))) {
    std::vector<ClusterRankMetrics> per(noise.size());
    parallel_for(noise.size(), lab.workers, [&](std::size_t i) {
      SamplerConfig sc = cfg.sampler();
      per[i] = cluster_rank_metrics(sample_trajectory(lab.sys.ens, lab.sys.router, p, noise[i], sc, i), lab.sys.ds.centroids);
    });
    std::vector<double> rank, match, frac;
    for (const auto& m : per) {
      rank.push_back(m.mean_rank);
      match.push_back(m.top2_match_rate);
      frac.push_back(m.top2_fraction);
    }
    summary.add({p.name(), stats::mean(rank), stats::stddev(rank), stats::mean(match), stats::mean(frac)});
    r.aggregates[p.name()] = {{"mean_rank", stats::mean(rank)}, {"rank_std", stats::stddev(rank)}, {"top2_match_rate", stats::mean(match)},
                              {"top2_fraction", stats::mean(frac)}};
  }
  r.tables = {summary};
  return r;
}

// Angles of every expert against the blended velocity along Top-2 paths.
struct AlignmentStudy {
  std::vector<double> selected, non_selected;
  std::vector<double> paired_sel, paired_non;  // per (sample, step) means
  stats::TTest welch, paired;
};

inline AlignmentStudy alignment_study(const Lab& lab, int n, const std::string& policy_name = "top2") {
  const auto& cfg = lab.cfg;
  const auto policy = cfg.policy(policy_name);
  const auto noise = noise_batch(cfg.master_seed, cfg.d, n);
  struct Slot {
    std::vector<double> sel, non, psel, pnon;
  };
  std::vector<Slot> slots(noise.size());
  parallel_for(noise.size(), lab.workers, [&](std::size_t i) {
    SamplerConfig sc = cfg.sampler();
    sc.record_all_experts = true;
    const auto tr = sample_trajectory(lab.sys.ens, lab.sys.router, policy, noise[i], sc, i);
    auto& s = slots[i];
    for (int step = 0; step <= tr.N; ++step) {
      const auto& vel = tr.velocities_all[static_cast<std::size_t>(step)];
      const auto& dec = tr.decisions[static_cast<std::size_t>(step)];
      const auto al = alignment(vel, blend(dec, vel), dec.selected);
      std::vector<double> a, b;
      for (const auto& e : al.per_expert) {
        if (!e.defined) continue;
        (e.selected ? a : b).push_back(e.theta_deg);
      }
      s.sel.insert(s.sel.end(), a.begin(), a.end());
      s.non.insert(s.non.end(), b.begin(), b.end());
      if (!a.empty() && !b.empty()) {
        s.psel.push_back(stats::mean(a));
        s.pnon.push_back(stats::mean(b));
      }
    }
  });
  AlignmentStudy st;
  for (const auto& s : slots) {
    st.selected.insert(st.selected.end(), s.sel.begin(), s.sel.end());
    st.non_selected.insert(st.non_selected.end(), s.non.begin(), s.non.end());
    st.paired_sel.insert(st.paired_sel.end(), s.psel.begin(), s.psel.end());
    st.paired_non.insert(st.paired_non.end(), s.pnon.begin(), s.pnon.end());
  }
  st.welch = stats::t_test(st.selected, st.non_selected, false);
  st.paired = stats::t_test(st.paired_sel, st.paired_non, true);
  return st;
}

inline void alignment_tables(const AlignmentStudy& st, ExperimentResult& r, const std::string& label = "") {
  Table summary{"summary", {"preset", "status", "mean_deg", "std_deg", "n"}, {}};
  Table tests{"tests", {"preset", "test", "t", "p", "df", "gap_deg"}, {}};
  const double gap = stats::mean(st.non_selected) - stats::mean(st.selected);
  summary.add({label, std::string("selected"), stats::mean(st.selected), stats::stddev(st.selected), static_cast<long long>(st.selected.size())});
  summary.add({label, std::string("non-selected"), stats::mean(st.non_selected), stats::stddev(st.non_selected),
               static_cast<long long>(st.non_selected.size())});
  tests.add({label, std::string("welch"), st.welch.t, st.welch.p, st.welch.df, gap});
  tests.add({label, std::string("paired"), st.paired.t, st.paired.p, st.paired.df, gap});
  auto merge = [&](Table t) {
    for (auto& existing : r.tables)
      if (existing.name == t.name) {
        for (auto& row : t.rows) existing.rows.push_back(row);
        return;
      }
    r.tables.push_back(std::move(t));
  };
  merge(summary);
  merge(tests);
  r.aggregates[label.empty() ? "default" : label] = {{"selected_mean_deg", stats::mean(st.selected)},
                                                     {"non_selected_mean_deg", stats::mean(st.non_selected)},
                                                     {"gap_deg", gap},
                                                     {"welch_p", st.welch.p},
                                                     {"paired_p", st.paired.p}};
}

inline ExperimentResult exp_expert_quality(const Lab& lab) {
  ExperimentResult r{"expert-quality", {}, {}};
  alignment_tables(alignment_study(lab, override_count(lab.cfg, "expert-quality", lab.cfg.count(200, false))), r, "default");
  return r;
}

struct DisagreementStudy {
  std::vector<double> d_int, distance;
  std::vector<int> quartile;
  double q_mean[4] = {0, 0, 0, 0};
  int q_count[4] = {0, 0, 0, 0};
  stats::Correlation rho;
  bool monotone = false;
};

/// Full-routing samples: integrated disagreement against the distance to the
/// Top-2 endpoint from the same noise.
inline DisagreementStudy disagreement_study(const Lab& lab, int n) {
  const auto& cfg = lab.cfg;
  const auto full = cfg.policy("full");
  const auto top2 = cfg.policy("top2");
  const auto noise = noise_batch(cfg.master_seed, cfg.d, n);
  DisagreementStudy st;
  st.d_int.resize(noise.size());
  st.distance.resize(noise.size());
  parallel_for(noise.size(), lab.workers, [&](std::size_t i) {
    SamplerConfig sc = cfg.sampler();
    sc.record_all_experts = true;
    const auto tf = sample_trajectory(lab.sys.ens, lab.sys.router, full, noise[i], sc, i);
    sc.record_all_experts = false;
    sc.record_decisions = false;
    const auto t2 = sample_trajectory(lab.sys.ens, lab.sys.router, top2, noise[i], sc, i);
    st.d_int[i] = disagreement(tf).D_int;
    st.distance[i] = delta_refine(tf.endpoint(), t2.endpoint());
  });
  st.quartile = stats::quartile_bin(st.d_int);
  for (std::size_t i = 0; i < st.quartile.size(); ++i) {
    st.q_mean[st.quartile[i] - 1] += st.distance[i];
    ++st.q_count[st.quartile[i] - 1];
  }
  for (int q = 0; q < 4; ++q) st.q_mean[q] = st.q_count[q] ? st.q_mean[q] / st.q_count[q] : kNaN;
  st.monotone = st.q_mean[0] < st.q_mean[1] && st.q_mean[1] < st.q_mean[2] && st.q_mean[2] < st.q_mean[3];
  st.rho = stats::spearman(st.d_int, st.distance);
  return st;
}

inline ExperimentResult exp_disagreement(const Lab& lab) {
  const auto st = disagreement_study(lab, override_count(lab.cfg, "disagreement", lab.cfg.count(500, false)));
  ExperimentResult r{"disagreement", {}, {}};
  Table summary{"summary", {"quartile", "n", "d_int_mean", "distance_mean", "distance_std"}, {}};
  for (int q = 1; q <= 4; ++q) {
    std::vector<double> d, dist;
    for (std::size_t i = 0; i < st.quartile.size(); ++i)
      if (st.quartile[i] == q) {
        d.push_back(st.d_int[i]);
        dist.push_back(st.distance[i]);
      }
    summary.add({"Q" + std::to_string(q), static_cast<long long>(d.size()), mean_or_nan(d), mean_or_nan(dist), std_or_nan(dist)});
  }
  Table samples{"samples", {"sample", "d_int", "distance_to_top2", "quartile"}, {}};
  for (std::size_t i = 0; i < st.d_int.size(); ++i)
    samples.add({static_cast<long long>(i), st.d_int[i], st.distance[i], static_cast<long long>(st.quartile[i])});
  r.tables = {summary, samples};
  r.aggregates = {{"quartile_distance", {st.q_mean[0], st.q_mean[1], st.q_mean[2], st.q_mean[3]}},
                  {"monotone", st.monotone},
                  {"spearman_rho", st.rho.rho},
                  {"spearman_p", st.rho.p}};
  return r;
}

inline ExperimentResult exp_local_error(const Lab& lab) {
  const auto& cfg = lab.cfg;
  const int n = override_count(cfg, "local-error", cfg.count(1000, true));
  const int points = 5;
  const double h = 0.01;
  const auto noise = noise_batch(cfg.master_seed, cfg.d, n);
  ExperimentResult r{"local-error", {}, {}};
  Table summary{"summary", {"policy", "eps_h", "eps_h_std", "eps_half_h", "eps_half_h_std", "scaling"}, {}};
  std::vector<double> means;
  for (const auto& p : policies_of(cfg, override_names(cfg, "local-error", {"top1", "top2", "full"}))) {
    std::vector<double> e1(noise.size()), e2(noise.size());
    parallel_for(noise.size(), lab.workers, [&](std::size_t i) {
      SamplerConfig sc;
      sc.N = static_cast<int>(std::lround(1.0 / h));
      sc.record_decisions = false;
      const auto tr = sample_trajectory(lab.sys.ens, lab.sys.router, p, noise[i], sc, i);
      Stream pick(derive_seed(cfg.master_seed, "local-error-points", i));
      Stream field_stream = policy_stream(p, i);
      auto field = [&](const Vec& x, double t) { return routed_velocity(lab.sys.ens, lab.sys.router, p, x, t, &field_stream).v; };
      double m1 = 0.0, m2 = 0.0;
      for (int j = 0; j < points; ++j) {
        const int step = static_cast<int>(pick.below(static_cast<std::uint64_t>(sc.N)));
        const Vec x = tr.state(step);
        const double t = tr.times[static_cast<std::size_t>(step)];
        m1 = std::max(m1, local_truncation_error(field, x, t, h).eps_local);
        m2 = std::max(m2, local_truncation_error(field, x, t, h / 2).eps_local);
      }
      e1[i] = m1;
      e2[i] = m2;
    });
    const double a = stats::mean(e1), b = stats::mean(e2);
    summary.add({p.name(), a, std_or_nan(e1), b, std_or_nan(e2), a / b});
    means.push_back(a);
    r.aggregates[p.name()] = {{"eps_h", a}, {"eps_half_h", b}, {"scaling", a / b}};
  }
  const auto [mn, mx] = std::minmax_element(means.begin(), means.end());
  r.aggregates["relative_spread"] = (*mx - *mn) / *mn;
  r.aggregates["h"] = h;
  r.tables = {summary};
  return r;
}

inline ExperimentResult exp_leff_trace(const Lab& lab) {
  const auto& cfg = lab.cfg;
  const int n = override_count(cfg, "leff-trace", cfg.count(20, true));
  const auto noise = noise_batch(cfg.master_seed, cfg.d, n);
  ExperimentResult r{"leff-trace", {}, {}};
  Table trace{"trace", {"policy", "n", "t", "p25", "p50", "p75", "iqr", "cumulative_iqr"}, {}};
  Table summary{"summary", {"policy", "final_cumulative_iqr", "median_norm"}, {}};
  for (const auto& p : policies_of(cfg, override_names(cfg, "leff-trace", cfg.policies))) {
    std::vector<LeffRecord> recs(noise.size());
    parallel_for(noise.size(), lab.workers, [&](std::size_t i) {
      const auto tr = sample_trajectory(lab.sys.ens, lab.sys.router, p, noise[i], cfg.sampler(), i);
      PowerIterConfig pc;
      pc.seed = cfg.power_seed(i);
      recs[i] = empirical_leff(lab.sys.ens, lab.sys.router, p, tr, JacobianMode::FullField, 1, pc);
    });
    std::vector<double> pooled;
    for (std::size_t s = 0; s < recs.front().per_step_norms.size(); ++s) {
      const auto& st = recs.front().per_step_norms[s];
      if (st.t < 0.1 - 1e-12 || st.t > 0.9 + 1e-12) continue;
      std::vector<double> v;
      for (const auto& rec : recs) v.push_back(rec.per_step_norms[s].norm);
      pooled.insert(pooled.end(), v.begin(), v.end());
      const double q1 = stats::percentile(v, 0.25), q2 = stats::percentile(v, 0.5), q3 = stats::percentile(v, 0.75);
      const double cum = stats::percentile(pooled, 0.75) - stats::percentile(pooled, 0.25);
      trace.add({p.name(), static_cast<long long>(st.n), st.t, q1, q2, q3, q3 - q1, cum});
    }
    const double fin = stats::percentile(pooled, 0.75) - stats::percentile(pooled, 0.25);
    summary.add({p.name(), fin, stats::percentile(pooled, 0.5)});
    r.aggregates[p.name()] = {{"final_cumulative_iqr", fin}};
  }
  r.tables = {summary, trace};
  return r;
}

inline ExperimentResult exp_refinement(const Lab& lab) {
  const auto& cfg = lab.cfg;
  const int n = override_count(cfg, "refinement", cfg.count(1000, true));
  const auto noise = noise_batch(cfg.master_seed, cfg.d, n);
  ExperimentResult r{"refinement", {}, {}};
  Table summary{"summary", {"policy", "n", "dref_mean", "dref_std", "leff_mean", "spearman_rho", "spearman_p", "auc_leff"}, {}};
  Table samples{"samples", {"policy", "sample", "leff", "dref"}, {}};
  SampleOptions opt;
  opt.N = cfg.N;
  opt.solver = cfg.solver;
  opt.leff = true;
  for (const auto& p : policies_of(cfg, override_names(cfg, "refinement", cfg.policies))) {
    const auto ms = run_samples(lab, p, noise, opt);
    const auto dref = collect(ms, [](auto& m) { return m.dref; });
    const auto leff = collect(ms, [](auto& m) { return m.leff; });
    const auto rho = stats::spearman(leff, dref);
    const double cut = stats::percentile(dref, 0.75);
    std::vector<int> high;
    for (double v : dref) high.push_back(v > cut ? 1 : 0);
    const auto a = stats::auc(leff, high);
    summary.add({p.name(), static_cast<long long>(n), stats::mean(dref), std_or_nan(dref), stats::mean(leff), rho.rho, rho.p, a.value});
    for (std::size_t i = 0; i < ms.size(); ++i) samples.add({p.name(), static_cast<long long>(i), ms[i].leff, ms[i].dref});
    r.aggregates[p.name()] = {{"spearman_rho", rho.rho}, {"spearman_p", rho.p}, {"dref_mean", stats::mean(dref)}, {"auc_leff", a.value}};
  }
  r.tables = {summary, samples};
  return r;
}

inline ExperimentResult exp_decomposition(const Lab& lab) {
  const auto& cfg = lab.cfg;
  const int n = override_count(cfg, "decomposition", cfg.count(100, true));
  const int n_profile = std::min(n, 20);
  const auto noise = noise_batch(cfg.master_seed, cfg.d, n);
  ExperimentResult r{"decomposition", {}, {}};
  Table summary{"summary", {"policy", "expert_term_mean", "expert_term_std", "router_term_mean", "router_term_std", "router_dominant_fraction"}, {}};
  Table profile{"profile", {"policy", "t", "expert_term_mean", "router_term_mean"}, {}};
  for (const auto& p : policies_of(cfg, override_names(cfg, "decomposition", {"top2", "full"}))) {
    std::vector<DecompositionRecord> mid(noise.size());
    std::vector<std::vector<std::pair<double, double>>> prof(static_cast<std::size_t>(n_profile));
    parallel_for(noise.size(), lab.workers, [&](std::size_t i) {
      const auto tr = sample_trajectory(lab.sys.ens, lab.sys.router, p, noise[i], cfg.sampler(), i);
      PowerIterConfig pc;
      pc.seed = cfg.power_seed(i);
      auto decompose = [&](int step) {
        const auto jac = routed_jacobian(lab.sys.ens, lab.sys.router, p, tr.decisions[static_cast<std::size_t>(step)], tr.state(step),
                                         tr.times[static_cast<std::size_t>(step)]);
        DecompositionRecord d;
        d.expert_term_norm = spectral_norm(jac.expert_term, pc).estimate;
        d.router_term_norm = spectral_norm(jac.router_term, pc).estimate;
        d.dominant = d.router_term_norm > d.expert_term_norm ? "router" : "expert";
        return d;
      };
      mid[i] = decompose(nearest_step(tr, 0.5));
      if (static_cast<int>(i) < n_profile)
        for (int step = 0; step <= tr.N; step += 5) {
          const auto d = decompose(step);
          prof[i].emplace_back(d.expert_term_norm, d.router_term_norm);
        }
    });
    std::vector<double> e, rt;
    double dominant = 0.0;
    for (const auto& d : mid) {
      e.push_back(d.expert_term_norm);
      rt.push_back(d.router_term_norm);
      dominant += d.dominant == "router";
    }
    summary.add({p.name(), stats::mean(e), std_or_nan(e), stats::mean(rt), std_or_nan(rt), dominant / static_cast<double>(mid.size())});
    r.aggregates[p.name()] = {{"expert_term_mean", stats::mean(e)}, {"router_term_mean", stats::mean(rt)}};
    const auto times = time_grid(cfg.N);
    for (std::size_t k = 0; k < prof.front().size(); ++k) {
      double a = 0.0, b = 0.0;
      for (const auto& pr : prof) {
        a += pr[k].first;
        b += pr[k].second;
      }
      profile.add({p.name(), times[5 * k], a / n_profile, b / n_profile});
    }
  }
  r.tables = {summary, profile};
  return r;
}

inline ExperimentResult sweep(const Lab& lab, const std::string& name, const std::string& key, const std::vector<double>& values,
                              const std::function<RoutingPolicy(double)>& make, int paper_count) {
  const auto& cfg = lab.cfg;
  const int n = override_count(cfg, name, cfg.count(paper_count, true));
  const auto noise = noise_batch(cfg.master_seed, cfg.d, n);
  ExperimentResult r{name, {}, {}};
  Table summary{"summary", {key, "entropy", "experts_used", "leff_mean", "leff_std", "dref_mean", "dref_std", "nll"}, {}};
  SampleOptions opt;
  opt.N = cfg.N;
  opt.solver = cfg.solver;
  opt.leff = true;
  json rows = json::array();
  for (double v : values) {
    const auto ms = run_samples(lab, make(v), noise, opt);
    const auto ent = collect(ms, [](auto& m) { return m.mean_entropy; });
    const auto used = collect(ms, [](auto& m) { return m.mean_selected; });
    const auto leff = collect(ms, [](auto& m) { return m.leff; });
    const auto dref = collect(ms, [](auto& m) { return m.dref; });
    const auto nll = collect(ms, [](auto& m) { return m.nll; });
    summary.add({v, stats::mean(ent), stats::mean(used), stats::mean(leff), std_or_nan(leff), stats::mean(dref), std_or_nan(dref), stats::mean(nll)});
    rows.push_back({{key, v}, {"entropy", stats::mean(ent)}, {"leff_mean", stats::mean(leff)}, {"dref_mean", stats::mean(dref)}});
  }
  r.aggregates["rows"] = rows;
  r.tables = {summary};
  return r;
}

inline ExperimentResult exp_temp_sweep(const Lab& lab) {
  const auto o = lab.cfg.override_for("temp-sweep");
  const std::vector<double> ts = o.value("temperatures", std::vector<double>{0.1, 0.25, 0.5, 1.0, 2.0, 4.0});
  return sweep(lab, "temp-sweep", "T", ts, [](double T) { return RoutingPolicy::full(T); }, 100);
}

inline ExperimentResult exp_topp_sweep(const Lab& lab) {
  const auto o = lab.cfg.override_for("topp-sweep");
  const std::vector<double> ps = o.value("p_values", std::vector<double>{0.8, 0.9, 1.0});
  return sweep(lab, "topp-sweep", "p", ps, [](double p) { return RoutingPolicy::top_p(p); }, 50);
}

inline ExperimentResult exp_counterfactual(const Lab& lab) {
  const auto& cfg = lab.cfg;
  const int n = override_count(cfg, "counterfactual", cfg.count(50, false));
  const auto noise = noise_batch(cfg.master_seed, cfg.d, n);
  ExperimentResult r{"counterfactual", {}, {}};
  Table summary{"summary", {"condition", "dref_mean", "dref_std", "nll"}, {}};
  SampleOptions opt;
  opt.N = cfg.N;
  opt.solver = cfg.solver;
  for (const auto& p : policies_of(cfg, override_names(cfg, "counterfactual", {"top2", "full", "weight-clip", "misaligned-top2"}))) {
    const auto ms = run_samples(lab, p, noise, opt);
    const auto dref = collect(ms, [](auto& m) { return m.dref; });
    const auto nll = collect(ms, [](auto& m) { return m.nll; });
    summary.add({p.name(), stats::mean(dref), std_or_nan(dref), stats::mean(nll)});
    r.aggregates[p.name()] = {{"dref_mean", stats::mean(dref)}, {"nll", stats::mean(nll)}};
  }
  r.tables = {summary};
  return r;
}

inline ExperimentResult exp_failure_modes(const Lab& lab) {
  const auto& cfg = lab.cfg;
  const int n = override_count(cfg, "failure-modes", cfg.count(100, true));
  const auto noise = noise_batch(cfg.master_seed, cfg.d, n);
  ExperimentResult r{"failure-modes", {}, {}};
  SampleOptions opt;
  opt.N = cfg.N;
  opt.solver = cfg.solver;
  opt.leff = true;
  const auto top2 = run_samples(lab, cfg.policy("top2"), noise, opt);
  const auto top2_dref = collect(top2, [](auto& m) { return m.dref; });
  const auto top2_leff = collect(top2, [](auto& m) { return m.leff; });
  const std::vector<std::pair<std::string, FailureThresholds>> protocols{
      {"percentile", FailureThresholds::from_top2(top2_dref, top2_leff, cfg.K)}, {"paper8", FailureThresholds::paper8()}};

  Table summary{"summary", {"policy", "protocol", "leff_mean", "leff_std", "dref_mean", "dref_std", "routing_uncertain", "poor_convergence", "high_leff"}, {}};
  Table flags{"flags", {"policy", "protocol", "sample", "leff", "dref", "max_entropy", "entropy_threshold", "dref_threshold", "leff_threshold",
                        "routing_uncertain", "poor_convergence", "high_leff"}, {}};
  Table thresholds{"thresholds", {"protocol", "entropy_nats", "delta_refine", "leff"}, {}};
  for (const auto& [name, th] : protocols) thresholds.add({name, th.entropy_nats, th.delta_refine, th.leff});
  for (const auto& p : policies_of(cfg, override_names(cfg, "failure-modes", {"top1", "top2", "top4", "full"}))) {
    const auto ms = p.name() == "top2" ? top2 : run_samples(lab, p, noise, opt);
    const auto leff = collect(ms, [](auto& m) { return m.leff; });
    const auto dref = collect(ms, [](auto& m) { return m.dref; });
    for (const auto& [name, th] : protocols) {
      double u = 0, c = 0, l = 0;
      for (std::size_t i = 0; i < ms.size(); ++i) {
        const auto f = failure_classify(ms[i].leff, ms[i].dref, ms[i].max_entropy, th);
        u += f.routing_uncertain;
        c += f.poor_convergence;
        l += f.high_leff;
        flags.add({p.name(), name, static_cast<long long>(i), ms[i].leff, ms[i].dref, ms[i].max_entropy, th.entropy_nats, th.delta_refine, th.leff,
                   static_cast<long long>(f.routing_uncertain), static_cast<long long>(f.poor_convergence), static_cast<long long>(f.high_leff)});
      }
      const double m = static_cast<double>(ms.size());
      summary.add({p.name(), name, stats::mean(leff), std_or_nan(leff), stats::mean(dref), std_or_nan(dref), u / m, c / m, l / m});
      r.aggregates[p.name() + "/" + name] = {{"routing_uncertain", u / m}, {"poor_convergence", c / m}, {"high_leff", l / m}};
    }
  }
  r.tables = {summary, thresholds, flags};
  return r;
}

inline ExperimentResult exp_switching(const Lab& lab) {
  const auto& cfg = lab.cfg;
  const int n = override_count(cfg, "switching", cfg.count(500, true));
  const auto noise = noise_batch(cfg.master_seed, cfg.d, n);
  ExperimentResult r{"switching", {}, {}};
  Table predictors{"summary", {"policy", "predictor", "auc_high_dref", "spearman_vs_dref"}, {}};
  Table margins{"margins", {"policy", "group", "median_mp_mean", "median_mp_std", "low_margin_step_fraction"}, {}};
  Table samples{"samples", {"policy", "sample", "dref", "leff", "s_eff", "s_int", "g_max", "median_mp", "low_margin_fraction"}, {}};
  SampleOptions opt;
  opt.N = cfg.N;
  opt.solver = cfg.solver;
  opt.leff = true;
  opt.all_experts = true;
  opt.keep_trajectory = true;
  for (const auto& p : policies_of(cfg, override_names(cfg, "switching", {"top1", "top2"}))) {
    auto ms = run_samples(lab, p, noise, opt);
    std::vector<double> dref, leff, seff, sint, gmax, neg_mp, med_mp, low;
    for (std::size_t i = 0; i < ms.size(); ++i) {
      const auto sw = switching_metrics(*ms[i].traj);
      std::vector<double> mp;
      for (const auto& st : sw.per_step) mp.push_back(st.m_p);
      const double med = stats::percentile(mp, 0.5);
      const double lowf = static_cast<double>(std::count_if(mp.begin(), mp.end(), [](double v) { return v < 0.05; })) / static_cast<double>(mp.size());
      dref.push_back(ms[i].dref);
      leff.push_back(ms[i].leff);
      seff.push_back(sw.S_eff);
      sint.push_back(sw.S_int);
      gmax.push_back(sw.g_max);
      med_mp.push_back(med);
      neg_mp.push_back(-med);
      low.push_back(lowf);
      samples.add({p.name(), static_cast<long long>(i), ms[i].dref, ms[i].leff, sw.S_eff, sw.S_int, sw.g_max, med, lowf});
      ms[i].traj.reset();
    }
    const double cut = stats::percentile(dref, 0.75);
    std::vector<int> high;
    for (double v : dref) high.push_back(v > cut ? 1 : 0);
    // Rank-average combination of two predictors.
    auto combine = [](const std::vector<double>& a, const std::vector<double>& b) {
      const auto ra = stats::average_ranks(a), rb = stats::average_ranks(b);
      std::vector<double> c(a.size());
      for (std::size_t i = 0; i < a.size(); ++i) c[i] = 0.5 * (ra[i] + rb[i]);
      return c;
    };
    const std::vector<std::pair<std::string, std::vector<double>>> preds{
        {"m_p only", neg_mp}, {"g only", gmax}, {"S_eff", seff}, {"S_int", sint}, {"L_eff only", leff}, {"L_eff + S_eff", combine(leff, seff)}};
    for (const auto& [name, score] : preds) {
      const auto a = stats::auc(score, high);
      const auto rho = stats::spearman(score, dref);
      predictors.add({p.name(), name, a.value, rho.rho});
      r.aggregates[p.name()][name] = {{"auc", a.value}, {"spearman", rho.rho}};
    }
    for (int unstable = 0; unstable <= 1; ++unstable) {
      std::vector<double> m, l;
      for (std::size_t i = 0; i < high.size(); ++i)
        if (high[i] == unstable) {
          m.push_back(med_mp[i]);
          l.push_back(low[i]);
        }
      margins.add({p.name(), std::string(unstable ? "unstable" : "stable"), mean_or_nan(m), std_or_nan(m), mean_or_nan(l)});
    }
  }
  r.tables = {predictors, margins, samples};
  return r;
}

/// Unit direction along which the generalization preset displaces the mixture.
inline Vec shift_direction(const LabConfig& cfg) {
  Vec u = noise_sample(cfg.master_seed, cfg.d, 0, "shift");
  return u / u.norm();
}

inline ExperimentResult exp_generalization(const Lab& lab) {
  const auto& cfg = lab.cfg;
  const int n = override_count(cfg, "generalization", cfg.count(100, true));
  const Vec shift = 0.5 * cfg.separation * shift_direction(cfg);
  // Shifted inputs: the same noise draws displaced with the mixture.
  auto noise = noise_batch(cfg.master_seed, cfg.d, n, "generalization-noise");
  for (auto& x : noise) x += shift;
  Mat shifted_means = lab.sys.ds.mixture_means;
  for (Eigen::Index k = 0; k < shifted_means.rows(); ++k) shifted_means.row(k) += shift.transpose();

  ExperimentResult r{"generalization", {}, {}};
  Table summary{"summary", {"policy", "regime", "N", "leff_mean", "leff_std", "dref_mean", "dref_std", "spearman", "auc", "nll_shifted"}, {}};
  for (const auto& [regime, N] : std::vector<std::pair<std::string, int>>{{"baseline", cfg.N}, {"stressed", 25}}) {
    SampleOptions opt;
    opt.N = N;
    opt.solver = Solver::Heun;
    opt.leff = true;
    for (const auto& p : policies_of(cfg, override_names(cfg, "generalization", {"top1", "top2", "full"}))) {
      const auto ms = run_samples(lab, p, noise, opt);
      const auto leff = collect(ms, [](auto& m) { return m.leff; });
      const auto dref = collect(ms, [](auto& m) { return m.dref; });
      std::vector<double> nll;
      for (const auto& m : ms) nll.push_back(mixture_nll(m.endpoint, shifted_means));
      const auto rho = stats::spearman(leff, dref);
      const double cut = stats::percentile(dref, 0.75);
      std::vector<int> high;
      for (double v : dref) high.push_back(v > cut ? 1 : 0);
      const auto a = stats::auc(leff, high);
      summary.add({p.name(), regime, static_cast<long long>(N), stats::mean(leff), std_or_nan(leff), stats::mean(dref), std_or_nan(dref), rho.rho, a.value,
                   stats::mean(nll)});
      r.aggregates[p.name() + "/" + regime] = {{"dref_mean", stats::mean(dref)}, {"leff_mean", stats::mean(leff)}, {"spearman", rho.rho}, {"auc", a.value}};
    }
  }
  r.aggregates["shift_norm"] = shift.norm();
  r.tables = {summary};
  return r;
}

struct SpecializationComparison {
  AlignmentStudy base, strong;
  DisagreementStudy base_dis, strong_dis;
  double gap_base = 0.0, gap_strong = 0.0;
};

inline SpecializationComparison specialization_comparison(const Lab& base, const Lab& strong, int n_align, int n_dis) {
  SpecializationComparison c;
  c.base = alignment_study(base, n_align);
  c.strong = alignment_study(strong, n_align);
  c.gap_base = stats::mean(c.base.non_selected) - stats::mean(c.base.selected);
  c.gap_strong = stats::mean(c.strong.non_selected) - stats::mean(c.strong.selected);
  c.base_dis = disagreement_study(base, n_dis);
  c.strong_dis = disagreement_study(strong, n_dis);
  return c;
}

/// Runs against a second, freshly trained system (K = 10, doubled
/// separation) unless one is supplied.
inline ExperimentResult exp_strong_specialization(const Lab& lab, const System* strong_system = nullptr) {
  const LabConfig scfg = strong_specialization(lab.cfg);
  std::optional<System> owned;
  if (!strong_system) {
    owned = build_system(scfg, lab.workers);
    strong_system = &*owned;
  }
  const Lab strong{scfg, *strong_system, lab.workers};
  const int n = override_count(lab.cfg, "strong-specialization", lab.cfg.count(500, false));
  const auto c = specialization_comparison(lab, strong, std::min(n, lab.cfg.count(200, false)), n);
  ExperimentResult r{"strong-specialization", {}, {}};
  Table summary{"summary", {"preset", "K", "separation", "selected_deg", "non_selected_deg", "gap_deg", "welch_p", "paired_p", "disagreement_rho"}, {}};
  auto row = [&](const std::string& name, const LabConfig& c2, const AlignmentStudy& a, const DisagreementStudy& d) {
    summary.add({name, static_cast<long long>(c2.K), c2.separation, stats::mean(a.selected), stats::mean(a.non_selected),
                 stats::mean(a.non_selected) - stats::mean(a.selected), a.welch.p, a.paired.p, d.rho.rho});
  };
  row("default", lab.cfg, c.base, c.base_dis);
  row("strong", scfg, c.strong, c.strong_dis);
  r.aggregates = {{"gap_default", c.gap_base}, {"gap_strong", c.gap_strong}, {"rho_default", c.base_dis.rho.rho}, {"rho_strong", c.strong_dis.rho.rho}};
  r.tables = {summary};
  return r;
}

/// Constant velocity: straight-line paths that Euler and Heun integrate exactly.
inline Vec exact_field_velocity(const Dataset& ds) { return -ds.mixture_means.row(0).transpose(); }

inline ExperimentResult exp_convergence(const Lab& lab) {
  const auto& cfg = lab.cfg;
  const int n = override_count(cfg, "convergence", cfg.count(500, true));
  const auto noise = noise_batch(cfg.master_seed, cfg.d, n);
  const std::vector<int> Ns = cfg.override_for("convergence").value("N_list", std::vector<int>{25, 50, 100});
  const double eps = cfg.convergence_epsilon;
  ExperimentResult r{"convergence", {}, {}};
  Table summary{"summary", {"policy", "N", "h", "epsilon", "exceed_fraction", "mean_error"}, {}};
  auto add = [&](const std::string& name, const std::vector<ConvergenceLevel>& lv) {
    json fr = json::array();
    for (const auto& l : lv) {
      summary.add({name, static_cast<long long>(l.N), l.h, eps, l.exceed_fraction, l.mean_error});
      fr.push_back(l.exceed_fraction);
    }
    r.aggregates[name] = {{"exceed_fraction", fr}};
  };
  for (const auto& p : policies_of(cfg, override_names(cfg, "convergence", cfg.policies))) {
    auto endpoint = [&](const Vec& x1, int N, std::size_t i) {
      SamplerConfig sc;
      sc.N = N;
      sc.solver = cfg.solver;
      sc.record_decisions = false;
      return sample_trajectory(lab.sys.ens, lab.sys.router, p, x1, sc, i).endpoint();
    };
    // Per-sample parallelism: evaluate one noise draw per task.
    std::vector<std::vector<ConvergenceLevel>> per(noise.size());
    parallel_for(noise.size(), lab.workers, [&](std::size_t i) {
      per[i] = convergence_probe([&](const Vec& x1, int N, std::size_t) { return endpoint(x1, N, i); }, {noise[i]}, eps, Ns);
    });
    std::vector<ConvergenceLevel> lv = per.front();
    for (std::size_t k = 0; k < lv.size(); ++k) {
      double f = 0, e = 0;
      for (const auto& pi : per) {
        f += pi[k].exceed_fraction;
        e += pi[k].mean_error;
      }
      lv[k].exceed_fraction = f / static_cast<double>(per.size());
      lv[k].mean_error = e / static_cast<double>(per.size());
    }
    add(p.name(), lv);
  }
  const Vec c = exact_field_velocity(lab.sys.ds);
  auto exact = [&](const Vec& x1, int N, std::size_t) {
    SamplerConfig sc;
    sc.N = N;
    sc.solver = cfg.solver;
    return integrate([&](const Vec&, double) { return c; }, x1, sc).endpoint();
  };
  add("exact-field", convergence_probe(exact, noise, eps, Ns));
  r.tables = {summary};
  return r;
}

struct ConsistencyStudy {
  std::vector<int> Ns;
  std::vector<double> leff_mean;
  std::vector<double> gap_mean;  // mean per-sample |L(h) - L(h/2)|
};

inline ConsistencyStudy consistency_study(const Lab& lab, const RoutingPolicy& p, int n, const std::vector<int>& Ns) {
  const auto noise = noise_batch(lab.cfg.master_seed, lab.cfg.d, n);
  std::vector<LeffConsistency> per(noise.size());
  parallel_for(noise.size(), lab.workers, [&](std::size_t i) {
    PowerIterConfig pc;
    pc.seed = lab.cfg.power_seed(i);
    per[i] = leff_consistency(lab.sys.ens, lab.sys.router, p, noise[i], Ns, JacobianMode::FullField, pc, i);
  });
  ConsistencyStudy st;
  st.Ns = Ns;
  for (std::size_t k = 0; k < Ns.size(); ++k) {
    double s = 0.0;
    for (const auto& c : per) s += c.levels[k].leff;
    st.leff_mean.push_back(s / static_cast<double>(per.size()));
  }
  for (std::size_t k = 0; k + 1 < Ns.size(); ++k) {
    double s = 0.0;
    for (const auto& c : per) s += c.gaps[k];
    st.gap_mean.push_back(s / static_cast<double>(per.size()));
  }
  return st;
}

/// An ensemble whose every expert is the linear field v = A x; its Jacobian
/// is A everywhere, whatever the routing.
inline ExpertEnsemble linear_ensemble(const Mat& A, int K, int m) {
  const int d = static_cast<int>(A.rows());
  ExpertEnsemble ens;
  ens.d = d;
  for (int k = 0; k < K; ++k) {
    DenseNet net = DenseNet::zeros({d + 2 * m, d});
    net.weights[0].leftCols(d) = A;
    ens.experts.push_back({net, k, 0, m});
  }
  return ens;
}

inline ExperimentResult exp_leff_consistency(const Lab& lab) {
  const auto& cfg = lab.cfg;
  const int n = override_count(cfg, "leff-consistency", cfg.count(50, true));
  const std::vector<int> Ns = cfg.override_for("leff-consistency").value("N_list", std::vector<int>{25, 50, 100});
  ExperimentResult r{"leff-consistency", {}, {}};
  Table summary{"summary", {"policy", "N", "h", "leff_mean", "gap_to_previous"}, {}};
  auto add = [&](const std::string& name, const ConsistencyStudy& st) {
    for (std::size_t k = 0; k < st.Ns.size(); ++k)
      summary.add({name, static_cast<long long>(st.Ns[k]), 1.0 / st.Ns[k], st.leff_mean[k], k ? st.gap_mean[k - 1] : kNaN});
    r.aggregates[name] = {{"leff_mean", st.leff_mean}, {"gaps", st.gap_mean}};
  };
  for (const auto& p : policies_of(cfg, override_names(cfg, "leff-consistency", cfg.policies))) add(p.name(), consistency_study(lab, p, n, Ns));

  Mat A = Mat::Zero(cfg.d, cfg.d);
  for (int i = 0; i < cfg.d; ++i) A(i, i) = -1.0 - 0.25 * i;
  const auto lin = linear_ensemble(A, lab.sys.ens.K(), lab.sys.ens.experts.front().time_features);
  const System synth{lab.sys.ds, lin, lab.sys.router};
  for (const auto& name : {"top1", "top2", "full"})
    add(std::string("constant-jacobian/") + name, consistency_study(Lab{cfg, synth, lab.workers}, cfg.policy(name), std::min(n, 5), Ns));
  r.tables = {summary};
  return r;
}

// ---------------------------------------------------------------------------

using Preset = std::function<ExperimentResult(const Lab&)>;

inline const std::vector<std::pair<std::string, Preset>>& presets() {
  static const std::vector<std::pair<std::string, Preset>> all{
      {"dissociation", exp_dissociation},
      {"cluster-rank", exp_cluster_rank},
      {"expert-quality", exp_expert_quality},
      {"disagreement", exp_disagreement},
      {"local-error", exp_local_error},
      {"leff-trace", exp_leff_trace},
      {"refinement", exp_refinement},
      {"decomposition", exp_decomposition},
      {"temp-sweep", exp_temp_sweep},
      {"topp-sweep", exp_topp_sweep},
      {"counterfactual", exp_counterfactual},
      {"failure-modes", exp_failure_modes},
      {"switching", exp_switching},
      {"generalization", exp_generalization},
      {"strong-specialization", [](const Lab& lab) { return exp_strong_specialization(lab); }},
      {"convergence", exp_convergence},
      {"leff-consistency", exp_leff_consistency},
  };
  return all;
}

inline std::string preset_names() {
  std::string s;
  for (const auto& [name, fn] : presets()) s += (s.empty() ? "" : ", ") + name;
  return s;
}

inline ExperimentResult run_preset(const std::string& name, const Lab& lab) {
  for (const auto& [n, fn] : presets())
    if (n == name) return fn(lab);
  throw ConfigError("unknown experiment '" + name + "'; available: " + preset_names());
}

inline void write_result(const fs::path& dir, const ExperimentResult& r) {
  for (const auto& t : r.tables) write_file(dir / (t.name + ".csv"), t.csv());
  write_file(dir / "aggregates.json", r.aggregates.dump(2) + "\n");
}

}  // namespace ddmlab::harness
