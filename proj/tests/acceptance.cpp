// Acceptance run: trains the default system for five master seeds and checks
// each criterion, printing one PASS/FAIL line per criterion. Exit status is
// nonzero when any criterion fails.

#include <chrono>
#include <cstdio>
#include <cstring>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "ddmlab/harness/experiments.hpp"

using namespace ddmlab;
using namespace ddmlab::harness;

namespace {

// Tolerances and vote counts.
constexpr int kSeeds = 5;
constexpr int kMajority = 4;            // "in >= 4 of 5 seeds"
constexpr double kDissociationBudget = 300.0;
constexpr double kAlignmentP = 0.01;
constexpr int kStrongMajority = 3;
constexpr double kLocalSpread = 0.05;
constexpr double kLocalScaling = 1.5;
constexpr double kHeunSlope[2] = {1.7, 2.3};
constexpr double kEulerSlope[2] = {0.8, 1.2};
constexpr double kExactEndpoint = 1e-6;
constexpr double kAdjointTol = 1e-6;
constexpr double kJvpTol = 1e-4;
constexpr double kSpectralTol = 0.01;
constexpr double kRecenterTol = 1e-8;
constexpr int kConsistencySeeds = 3;
constexpr int kConsistencyMajority = 2;

using Clock = std::chrono::steady_clock;
double since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Seeded {
  LabConfig cfg;
  System sys;
};

int failures = 0;

void report(int id, bool pass, const std::string& what) {
  if (!pass) ++failures;
  std::printf("%s [%d] %s\n", pass ? "PASS" : "FAIL", id, what.c_str());
  std::fflush(stdout);
}

std::string fmt(const char* f, double a) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

std::string votes(int yes, int of) { return std::to_string(yes) + "/" + std::to_string(of); }

// ---------------------------------------------------------------------------

void dissociation(const std::vector<Seeded>& runs) {
  int ok = 0;
  double worst_time = 0.0;
  std::string detail;
  for (const auto& r : runs) {
    const auto t0 = Clock::now();
    const auto res = exp_dissociation(Lab{r.cfg, r.sys, 1});
    worst_time = std::max(worst_time, since(t0));
    const auto& a = res.aggregates;
    const double d1 = a["top1"]["dref_mean"], d2 = a["top2"]["dref_mean"], df = a["full"]["dref_mean"];
    const double n2 = a["top2"]["nll"], nf = a["full"]["nll"];
    const bool order = df < d2 && d2 < d1;
    const bool quality = nf > n2;
    ok += order && quality;
    char buf[200];
    std::snprintf(buf, sizeof buf, " s%llu(dref %.4f/%.4f/%.4f nll2 %.3f nllF %.3f)", static_cast<unsigned long long>(r.cfg.master_seed), d1, d2, df,
                  n2, nf);
    detail += buf;
  }
  report(1, ok >= kMajority && worst_time <= kDissociationBudget,
         "dissociation Full<Top2<Top1 dref and NLL(Full)>NLL(Top2): " + votes(ok, kSeeds) + " seeds, slowest run " + fmt("%.0fs", worst_time) +
             ";" + detail);
}

void cluster_rank(const std::vector<Seeded>& runs) {
  int ok = 0;
  bool full_exact = true;
  std::string detail;
  for (const auto& r : runs) {
    const auto a = exp_cluster_rank(Lab{r.cfg, r.sys, 1}).aggregates;
    const double full = a["full"]["mean_rank"], want = (r.cfg.K + 1) / 2.0;
    full_exact = full_exact && full == want && a["full"]["rank_std"].get<double>() == 0.0;
    bool sparse = true;
    for (const char* p : {"top1", "top2"})
      sparse = sparse && a[p]["mean_rank"].get<double>() < 2.5 && a[p]["top2_match_rate"].get<double>() > 0.7;
    ok += sparse;
    char buf[160];
    std::snprintf(buf, sizeof buf, " s%llu(%.2f/%.2f/%.2f match %.2f/%.2f)", static_cast<unsigned long long>(r.cfg.master_seed),
                  a["top1"]["mean_rank"].get<double>(), a["top2"]["mean_rank"].get<double>(), full, a["top1"]["top2_match_rate"].get<double>(),
                  a["top2"]["top2_match_rate"].get<double>());
    detail += buf;
  }
  report(2, ok >= kMajority && full_exact, "cluster rank sparse<2.5 & match>70%: " + votes(ok, kSeeds) + ", Full exactly (K+1)/2: " +
                                               (full_exact ? "yes" : "no") + ";" + detail);
}

void alignment(const std::vector<Seeded>& runs, const std::vector<Seeded>& strong) {
  int ok = 0, wider = 0;
  std::string detail;
  for (std::size_t i = 0; i < runs.size(); ++i) {
    const Lab base{runs[i].cfg, runs[i].sys, 1};
    const int n = runs[i].cfg.count(200, false);
    const auto st = alignment_study(base, n);
    const double sel = stats::mean(st.selected), non = stats::mean(st.non_selected);
    ok += sel < non && st.welch.p < kAlignmentP && st.paired.p < kAlignmentP;
    const auto ss = alignment_study(Lab{strong[i].cfg, strong[i].sys, 1}, n);
    const double gap = non - sel, gap_strong = stats::mean(ss.non_selected) - stats::mean(ss.selected);
    wider += gap_strong > gap;
    char buf[200];
    std::snprintf(buf, sizeof buf, " s%llu(%.1f vs %.1f deg, p %.1e/%.1e; strong gap %.1f vs %.1f)",
                  static_cast<unsigned long long>(runs[i].cfg.master_seed), sel, non, st.welch.p, st.paired.p, gap_strong, gap);
    detail += buf;
  }
  report(3, ok >= kMajority && wider >= kStrongMajority,
         "selected experts closer than non-selected (p<0.01): " + votes(ok, kSeeds) + ", strong gap > default gap: " + votes(wider, kSeeds) + ";" +
             detail);
}

void disagreement_quartiles(const std::vector<Seeded>& runs) {
  int ok = 0;
  std::string detail;
  for (const auto& r : runs) {
    const auto st = disagreement_study(Lab{r.cfg, r.sys, 1}, r.cfg.count(500, false));
    ok += st.monotone;
    char buf[160];
    std::snprintf(buf, sizeof buf, " s%llu(%.4f<%.4f<%.4f<%.4f)", static_cast<unsigned long long>(r.cfg.master_seed), st.q_mean[0], st.q_mean[1],
                  st.q_mean[2], st.q_mean[3]);
    detail += buf;
  }
  report(4, ok >= kMajority, "distance to Top-2 rises over D_int quartiles Q1..Q4: " + votes(ok, kSeeds) + ";" + detail);
}

void local_error(const std::vector<Seeded>& runs) {
  int invariant = 0, scaling = 0;
  std::string detail;
  for (const auto& r : runs) {
    const auto a = exp_local_error(Lab{r.cfg, r.sys, 1}).aggregates;
    const double spread = a["relative_spread"];
    double worst_scaling = 1e300;
    for (const char* p : {"top1", "top2", "full"}) worst_scaling = std::min(worst_scaling, a[p]["scaling"].get<double>());
    invariant += spread < kLocalSpread;
    scaling += worst_scaling > kLocalScaling;
    char buf[200];
    std::snprintf(buf, sizeof buf, " s%llu(eps %.2e/%.2e/%.2e spread %.0f%% scaling>=%.2f)", static_cast<unsigned long long>(r.cfg.master_seed),
                  a["top1"]["eps_h"].get<double>(), a["top2"]["eps_h"].get<double>(), a["full"]["eps_h"].get<double>(), 100 * spread, worst_scaling);
    detail += buf;
  }
  report(5, invariant >= kMajority && scaling >= kMajority,
         "local error spread<5%: " + votes(invariant, kSeeds) + ", halving h shrinks error >1.5x: " + votes(scaling, kSeeds) + ";" + detail);
}

double loglog_slope(const std::vector<double>& h, const std::vector<double>& e) {
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < h.size(); ++i) {
    mx += std::log(h[i]) / static_cast<double>(h.size());
    my += std::log(e[i]) / static_cast<double>(h.size());
  }
  double sxy = 0, sxx = 0;
  for (std::size_t i = 0; i < h.size(); ++i) {
    sxy += (std::log(h[i]) - mx) * (std::log(e[i]) - my);
    sxx += (std::log(h[i]) - mx) * (std::log(h[i]) - mx);
  }
  return sxy / sxx;
}

void solver_orders(const Seeded& run) {
  Vec x1(3);
  x1 << 1.0, -0.5, 0.25;
  auto id = [](const Vec& x, double) -> Vec { return x; };
  double slopes[2];
  for (Solver s : {Solver::Euler, Solver::Heun}) {
    std::vector<double> hs, es;
    for (int N : {10, 20, 40, 80}) {
      SamplerConfig cfg;
      cfg.N = N;
      cfg.solver = s;
      hs.push_back(1.0 / N);
      es.push_back((integrate(id, x1, cfg).endpoint() - std::exp(-1.0) * x1).norm());
    }
    slopes[s == Solver::Heun] = loglog_slope(hs, es);
  }
  // straight-line paths toward the first mixture mean, integrated by both solvers
  const Vec c = exact_field_velocity(run.sys.ds);
  const Vec target = run.sys.ds.mixture_means.row(0).transpose();
  double exact_err = 0.0;
  for (Solver s : {Solver::Euler, Solver::Heun})
    for (int N : {10, 50}) {
      SamplerConfig cfg;
      cfg.N = N;
      cfg.solver = s;
      const Vec start = Vec::Zero(run.cfg.d);
      exact_err = std::max(exact_err, (integrate([&](const Vec&, double) { return c; }, start, cfg).endpoint() - target).norm());
    }
  const bool pass = slopes[1] >= kHeunSlope[0] && slopes[1] <= kHeunSlope[1] && slopes[0] >= kEulerSlope[0] && slopes[0] <= kEulerSlope[1] &&
                    exact_err < kExactEndpoint;
  report(6, pass, "solver orders: Heun slope " + fmt("%.3f", slopes[1]) + ", Euler slope " + fmt("%.3f", slopes[0]) + ", exact-field endpoint error " +
                      fmt("%.1e", exact_err));
}

std::vector<double> jacobi_eigenvalues(Mat A) {
  const Eigen::Index n = A.rows();
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0;
    for (Eigen::Index p = 0; p < n; ++p)
      for (Eigen::Index q = p + 1; q < n; ++q) off += A(p, q) * A(p, q);
    if (off < 1e-26) break;
    for (Eigen::Index p = 0; p < n; ++p)
      for (Eigen::Index q = p + 1; q < n; ++q) {
        if (std::abs(A(p, q)) < 1e-300) continue;
        const double theta = (A(q, q) - A(p, p)) / (2 * A(p, q));
        const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1));
        const double cs = 1 / std::sqrt(t * t + 1), sn = t * cs;
        for (Eigen::Index k = 0; k < n; ++k) {
          const double akp = A(k, p), akq = A(k, q);
          A(k, p) = cs * akp - sn * akq;
          A(k, q) = sn * akp + cs * akq;
        }
        for (Eigen::Index k = 0; k < n; ++k) {
          const double apk = A(p, k), aqk = A(q, k);
          A(p, k) = cs * apk - sn * aqk;
          A(q, k) = sn * apk + cs * aqk;
        }
      }
  }
  std::vector<double> ev;
  for (Eigen::Index i = 0; i < n; ++i) ev.push_back(A(i, i));
  return ev;
}

Mat dense(const LinearMapOracle& m) {
  Mat J(m.dim, m.dim);
  for (int j = 0; j < m.dim; ++j) J.col(j) = m.apply(Vec::Unit(m.dim, j));
  return J;
}

Vec gaussian(Stream& s, int n) {
  Vec v(n);
  for (int i = 0; i < n; ++i) v[i] = s.normal();
  return v;
}

void jacobian_machinery(const Seeded& run) {
  const auto& sys = run.sys;
  const int d = run.cfg.d;
  Stream s(derive_seed(run.cfg.master_seed, "acceptance-jacobian"));
  double adjoint = 0.0, jvp = 0.0, recenter = 0.0, spectral = 0.0;
  for (int i = 0; i < 100; ++i) {
    const Vec x = 2.0 * gaussian(s, d);
    const double t = 0.02 + 0.96 * s.uniform();
    const auto pol = i % 3 == 0 ? RoutingPolicy::full() : RoutingPolicy::top_k(1 + i % 3);
    const auto dec = route(sys.router, pol, x, t);
    const auto jac = routed_jacobian(sys.ens, sys.router, pol, dec, x, t);
    const Vec u = gaussian(s, d), w = gaussian(s, d);
    const double lhs = jac.full.apply(u).dot(w), rhs = u.dot(jac.full.apply_adjoint(w));
    adjoint = std::max(adjoint, std::abs(lhs - rhs) / std::max(1.0, std::abs(lhs)));

    const auto& e = sys.ens.experts[static_cast<std::size_t>(i % sys.ens.K())];
    const Vec in = feature_input(x, t, e.time_features);
    Vec tangent = Vec::Zero(in.size());
    tangent.head(d) = u;
    const Vec fd = (net_forward(e.net, in + 1e-5 * tangent) - net_forward(e.net, in - 1e-5 * tangent)) / 2e-5;
    jvp = std::max(jvp, (net_jvp(e.net, in, tangent) - fd).norm() / fd.norm());

    recenter = std::max(recenter, (dense(jac.router_term) - dense(jac.router_term_recentered)).cwiseAbs().maxCoeff());
  }
  for (int i = 0; i < 20; ++i) {
    Mat A(5, 5);
    for (int r = 0; r < 5; ++r)
      for (int c = 0; c < 5; ++c) A(r, c) = s.normal();
    const auto ev = jacobi_eigenvalues(A.transpose() * A);
    const double sigma = std::sqrt(*std::max_element(ev.begin(), ev.end()));
    PowerIterConfig cfg;
    cfg.max_iter = 500;
    cfg.rel_tol = 1e-10;
    spectral = std::max(spectral, std::abs(spectral_norm(matrix_oracle(A), cfg).estimate - sigma) / sigma);
  }
  const bool pass = adjoint < kAdjointTol && jvp < kJvpTol && spectral < kSpectralTol && recenter < kRecenterTol;
  report(7, pass, "Jacobian machinery: adjoint " + fmt("%.1e", adjoint) + ", JVP vs FD " + fmt("%.1e", jvp) + ", spectral vs Jacobi " +
                      fmt("%.1e", spectral) + ", recentered router term " + fmt("%.1e", recenter));
}

void refinement_determinism(const Seeded& run) {
  LabConfig cfg = run.cfg;
  const auto a = exp_refinement(Lab{cfg, run.sys, 1}).aggregates;
  const auto b = exp_refinement(Lab{cfg, run.sys, 1}).aggregates;
  bool same = true;
  std::string detail;
  for (const char* p : {"top1", "top2", "full"}) {
    const double ra = a[p]["spearman_rho"], rb = b[p]["spearman_rho"];
    same = same && std::memcmp(&ra, &rb, sizeof ra) == 0;
    detail += std::string(" ") + p + " rho=" + fmt("%.4f", ra);
  }
  report(8, same, std::string("refinement rho reproducible bit-for-bit: ") + (same ? "yes" : "no") + ";" + detail + " (reported, not gated)");
}

void convergence(const std::vector<Seeded>& runs) {
  int ok = 0;
  bool exact_zero = true;
  std::string detail;
  for (const auto& r : runs) {
    LabConfig cfg = r.cfg;
    cfg.overrides["convergence"] = {{"policies", {"top2"}}};
    const auto a = exp_convergence(Lab{cfg, r.sys, 1}).aggregates;
    const auto f = a["top2"]["exceed_fraction"].get<std::vector<double>>();
    ok += f[1] <= f[0] && f[2] <= f[1];
    for (double v : a["exact-field"]["exceed_fraction"].get<std::vector<double>>()) exact_zero = exact_zero && v == 0.0;
    char buf[120];
    std::snprintf(buf, sizeof buf, " s%llu(%.3f>=%.3f>=%.3f)", static_cast<unsigned long long>(r.cfg.master_seed), f[0], f[1], f[2]);
    detail += buf;
  }
  report(9, ok >= kMajority && exact_zero, "Top-2 exceedance fraction (eps " + fmt("%g", runs.front().cfg.convergence_epsilon) +
                                                ") non-increasing over N 25/50/100: " + votes(ok, kSeeds) + ", exact field all zero: " +
                                                (exact_zero ? "yes" : "no") + ";" + detail);
}

void leff_consistency_check(const std::vector<Seeded>& runs) {
  const std::vector<int> Ns{25, 50, 100};
  int ok = 0;
  std::string detail;
  for (int i = 0; i < kConsistencySeeds; ++i) {
    const auto& r = runs[static_cast<std::size_t>(i)];
    const auto st = consistency_study(Lab{r.cfg, r.sys, 1}, r.cfg.policy("top2"), r.cfg.count(50, true), Ns);
    ok += st.gap_mean[1] <= st.gap_mean[0];
    char buf[120];
    std::snprintf(buf, sizeof buf, " s%llu(gaps %.3f, %.3f)", static_cast<unsigned long long>(r.cfg.master_seed), st.gap_mean[0], st.gap_mean[1]);
    detail += buf;
  }
  // constant Jacobian: every expert is v = A x
  const auto& r = runs.front();
  Mat A = Mat::Zero(r.cfg.d, r.cfg.d);
  for (int i = 0; i < r.cfg.d; ++i) A(i, i) = -1.0 - 0.25 * i;
  const System synth{r.sys.ds, linear_ensemble(A, r.cfg.K, r.sys.ens.experts.front().time_features), r.sys.router};
  const auto c = consistency_study(Lab{r.cfg, synth, 1}, r.cfg.policy("top1"), 5, Ns);
  const bool exact = c.gap_mean[0] == 0.0 && c.gap_mean[1] == 0.0;
  report(10, ok >= kConsistencyMajority && exact, "Top-2 leff gap non-increasing: " + votes(ok, kConsistencySeeds) +
                                                      ", constant-Jacobian gaps exactly 0: " + (exact ? "yes" : "no") + ";" + detail);
}

}  // namespace

int main() {
  const auto t0 = Clock::now();
  std::vector<Seeded> runs, strong;
  for (std::uint64_t seed = 1; seed <= kSeeds; ++seed) {
    LabConfig cfg;
    cfg.master_seed = seed;
    auto sys = build_system(cfg);
    runs.push_back({cfg, std::move(sys)});
  }
  std::printf("trained %d default systems in %.0fs\n", kSeeds, since(t0));
  std::fflush(stdout);

  auto timed = [](const char* name, auto&& f) {
    const auto t = Clock::now();
    f();
    std::printf("      (%s: %.0fs)\n", name, since(t));
    std::fflush(stdout);
  };
  timed("dissociation", [&] { dissociation(runs); });
  timed("cluster rank", [&] { cluster_rank(runs); });
  timed("strong systems", [&] {
    for (const auto& r : runs) {
      const LabConfig scfg = strong_specialization(r.cfg);
      strong.push_back({scfg, build_system(scfg)});
    }
  });
  timed("alignment", [&] { alignment(runs, strong); });
  timed("disagreement", [&] { disagreement_quartiles(runs); });
  timed("local error", [&] { local_error(runs); });
  timed("solver orders", [&] { solver_orders(runs.front()); });
  timed("jacobian", [&] { jacobian_machinery(runs.front()); });
  timed("refinement", [&] { refinement_determinism(runs.front()); });
  timed("convergence", [&] { convergence(runs); });
  timed("leff consistency", [&] { leff_consistency_check(runs); });

  std::printf("%d of 10 criteria failed; total %.0fs\n", failures, since(t0));
  return failures == 0 ? 0 : 1;
}
