#include "catch_amalgamated.hpp"

#include "ddmlab/diagnostics.hpp"
#include "support.hpp"

using namespace ddmlab;
using namespace testing;
using Catch::Matchers::WithinAbs;
using Catch::Matchers::WithinRel;

namespace {

PowerIterConfig tight() {
  PowerIterConfig cfg;
  cfg.check_at = {50, 51};
  cfg.rel_tol = 1e-12;
  cfg.max_iter = 2000;
  return cfg;
}

double exact_norm(const Mat& J) { return Eigen::JacobiSVD<Mat>(J).singularValues()[0]; }

// Every expert has velocity A x, so the routed field is A x whatever the weights.
ExpertEnsemble shared_linear(const Mat& A, int K) {
  std::vector<Expert> ex;
  for (int k = 0; k < K; ++k) ex.push_back(affine_expert(A, Vec::Zero(A.rows()), k));
  return ensemble_of(ex);
}

Trajectory recorded(const RandomSystem& sys, const RoutingPolicy& pol, const Vec& x1, int N) {
  SamplerConfig cfg;
  cfg.N = N;
  cfg.record_all_experts = true;
  return sample_trajectory(sys.ens, sys.router, pol, x1, cfg, 1);
}

}  // namespace

TEST_CASE("leff of a shared linear field is the spectral norm of A") {
  Stream s(1);
  const Mat A = random_mat(s, 3, 3);
  const auto ens = shared_linear(A, 3);
  const Router router{DenseNet::random({3 + 4, 8, 3}, 2), 2};
  SamplerConfig cfg;
  cfg.N = 10;
  for (const auto& pol : {RoutingPolicy::full(), RoutingPolicy::top_k(2)}) {
    const auto tr = sample_trajectory(ens, router, pol, random_vec(s, 3), cfg);
    const auto rec = empirical_leff(ens, router, pol, tr, JacobianMode::FullField, 1, tight());
    REQUIRE(rec.per_step_norms.size() == 11);
    for (const auto& st : rec.per_step_norms) CHECK_THAT(st.norm, WithinRel(exact_norm(A), 1e-6));
    CHECK_THAT(rec.leff, WithinRel(exact_norm(A), 1e-6));
  }
}

TEST_CASE("leff of the zero field is 0") {
  const auto ens = shared_linear(Mat::Zero(2, 2), 2);
  const auto router = uniform_router(2, 2);
  SamplerConfig cfg;
  cfg.N = 5;
  const auto tr = sample_trajectory(ens, router, RoutingPolicy::full(), vec({1, 2}), cfg);
  CHECK(empirical_leff(ens, router, RoutingPolicy::full(), tr).leff == 0.0);
  cfg.record_decisions = false;
  CHECK_THROWS_AS(empirical_leff(ens, router, RoutingPolicy::full(), sample_trajectory(ens, router, RoutingPolicy::full(), vec({1, 2}), cfg)),
                  ConfigError);
}

TEST_CASE("stride subsamples the recorded states") {
  const auto sys = random_system(3, 2, 3);
  const auto tr = recorded(sys, RoutingPolicy::top_k(2), vec({0.5, -0.5}), 10);
  const auto rec = empirical_leff(sys.ens, sys.router, RoutingPolicy::top_k(2), tr, JacobianMode::FullField, 3);
  REQUIRE(rec.per_step_norms.size() == 4);
  CHECK(rec.per_step_norms[1].n == 3);
  CHECK_THROWS_AS(empirical_leff(sys.ens, sys.router, RoutingPolicy::top_k(2), tr, JacobianMode::FullField, 0), ConfigError);
}

TEST_CASE("routed Jacobian: adjoint pairs, finite differences and the triangle inequality") {
  const auto sys = random_system(4, 3, 4);
  Stream s(5);
  for (const auto& pol : {RoutingPolicy::full(), RoutingPolicy::top_k(2), RoutingPolicy::full(0.5)}) {
    for (int i = 0; i < 20; ++i) {
      const Vec x = random_vec(s, 3);
      const double t = 0.05 + 0.9 * s.uniform();
      const auto dec = route(sys.router, pol, x, t);
      const auto jac = routed_jacobian(sys.ens, sys.router, pol, dec, x, t);

      const Vec u = random_vec(s, 3), w = random_vec(s, 3);
      for (const auto* op : {&jac.full, &jac.expert_term, &jac.router_term})
        CHECK(std::abs(op->apply(u).dot(w) - u.dot(op->apply_adjoint(w))) < 1e-10);

      // finite differences with the selection frozen
      auto frozen = [&](const Vec& y) -> Vec {
        auto d = apply_policy(sys.router.logits(y, t), RoutingPolicy::full(pol.temperature));
        Vec out = Vec::Zero(3);
        double mass = 0.0;
        for (int k : dec.selected) mass += d.probs[k];
        for (int k : dec.selected) out += d.probs[k] / mass * expert_velocity(sys.ens.experts[static_cast<std::size_t>(k)], y, t);
        return out;
      };
      const Mat J = dense(jac.full);
      CHECK((J - fd_jacobian(frozen, x)).cwiseAbs().maxCoeff() < 1e-6 * std::max(1.0, J.cwiseAbs().maxCoeff()));

      const double full = exact_norm(J), ex = exact_norm(dense(jac.expert_term)), rt = exact_norm(dense(jac.router_term));
      CHECK(full <= ex + rt + 1e-12);
      CHECK(ex <= full + rt + 1e-12);
    }
  }
}

TEST_CASE("recentered router term equals the plain router term at 100 states") {
  const auto sys = random_system(5, 4, 6);
  Stream s(7);
  for (int i = 0; i < 100; ++i) {
    const Vec x = 2.0 * random_vec(s, 4);
    const double t = s.uniform();
    const auto pol = i % 2 ? RoutingPolicy::full() : RoutingPolicy::top_k(3);
    const auto jac = routed_jacobian(sys.ens, sys.router, pol, route(sys.router, pol, x, t), x, t);
    CHECK((dense(jac.router_term) - dense(jac.router_term_recentered)).cwiseAbs().maxCoeff() < 1e-8);
  }
}

TEST_CASE("router term vanishes for constant weights or identical experts") {
  Stream s(8);
  const auto sys = random_system(3, 3, 9);
  const Vec x = random_vec(s, 3);
  // zero router weights: uniform probs everywhere
  const auto flat = jacobian_decomposition(sys.ens, uniform_router(3, 3), RoutingPolicy::full(), x, 0.4, tight());
  CHECK(flat.router_term_norm == 0.0);
  CHECK(flat.dominant == "expert");

  const auto e = sys.ens.experts[0];
  const auto same = ensemble_of({e, e, e});
  const Router sharp{DenseNet::random({3 + 4, 16, 3}, 10), 2};
  for (double T : {1.0, 0.01}) {
    const auto rec = jacobian_decomposition(same, sharp, RoutingPolicy::full(T), x, 0.4, tight());
    CHECK(rec.router_term_norm < 1e-12);
  }
}

TEST_CASE("constant-Jacobian field gives identical leff at every step size") {
  Stream s(11);
  const Mat A = random_mat(s, 3, 3);
  const auto ens = shared_linear(A, 4);
  const auto router = nearest_centroid_router(random_mat(s, 4, 3));
  const Vec x1 = random_vec(s, 3);
  const auto one = leff_consistency(ens, router, RoutingPolicy::top_k(1), x1, {25, 50, 100});
  REQUIRE(one.gaps.size() == 2);
  for (double g : one.gaps) CHECK(g == 0.0);
  for (const auto& pol : {RoutingPolicy::top_k(2), RoutingPolicy::full()})
    for (double g : leff_consistency(ens, router, pol, x1, {25, 50, 100}).gaps) CHECK(g < 1e-12);
  CHECK(leff_consistency(ens, router, RoutingPolicy::top_k(1), x1, {50}).gaps.empty());
  CHECK_THROWS_AS(leff_consistency(ens, router, RoutingPolicy::top_k(1), x1, {50, 25}), ConfigError);
}

TEST_CASE("delta_refine is a normalized distance") {
  const Vec a = vec({1, 2, 3, 4});
  CHECK(delta_refine(a, a) == 0.0);
  CHECK(delta_refine(a, a + Vec::Unit(4, 2)) == 0.5);
  Stream s(12);
  for (int i = 0; i < 100; ++i) {
    const Vec x = random_vec(s, 5), y = random_vec(s, 5);
    CHECK(delta_refine(x, y) == delta_refine(y, x));
    CHECK(delta_refine(x, y) > 0.0);
  }
  CHECK_THROWS_AS(delta_refine(a, vec({1})), ShapeError);
}

TEST_CASE("local truncation error on v(x) = x") {
  auto f = [](const Vec& x, double) -> Vec { return x; };
  const auto r = local_truncation_error(f, vec({1.0}), 1.0, 0.1);
  // one Heun step multiplies by 1 - h + h^2/2; ten sub-steps by (1 - s + s^2/2)^10
  const double oracle = std::abs(0.905 - std::pow(1 - 0.01 + 0.00005, 10));
  CHECK_THAT(r.eps_local, WithinAbs(oracle, 1e-15));
  CHECK_THAT(r.eps_local, WithinAbs(1.6e-4, 3e-6));
  CHECK(r.h == 0.1);

  auto c = [](const Vec&, double) -> Vec { return vec({1.0, -2.0}); };
  CHECK(local_truncation_error(c, vec({0.0, 0.0}), 0.5, 0.1).eps_local < 1e-15);
  CHECK_THROWS_AS(local_truncation_error(f, vec({1.0}), 0.05, 0.1), DomainError);
}

TEST_CASE("halving h shrinks the local error of a smooth field") {
  const auto sys = random_system(4, 3, 13);
  auto field = [&](const Vec& x, double t) -> Vec { return routed_velocity(sys.ens, sys.router, RoutingPolicy::full(), x, t).v; };
  Stream s(14);
  for (int i = 0; i < 5; ++i) {
    const auto r = local_error_with_scaling(field, random_vec(s, 3), 0.6, 0.05);
    REQUIRE(r.scaling_ratio.has_value());
    CHECK(*r.scaling_ratio > 1.5);
  }
}

TEST_CASE("pairwise disagreement examples") {
  CHECK_THAT(pairwise_disagreement({vec({1, 0}), vec({0, 1})}), WithinAbs(std::sqrt(2.0), 1e-15));
  CHECK(pairwise_disagreement({vec({1, 2}), vec({1, 2}), vec({1, 2})}) == 0.0);
  const double h = std::sqrt(3.0) / 2;
  CHECK_THAT(pairwise_disagreement({vec({0, 0}), vec({1, 0}), vec({0.5, h})}), WithinAbs(1.0, 1e-15));
  CHECK(pairwise_disagreement({vec({3, 3})}) == 0.0);

  Stream s(15);
  std::vector<Vec> v;
  for (int k = 0; k < 6; ++k) v.push_back(random_vec(s, 4));
  const double base = pairwise_disagreement(v);
  std::vector<Vec> p{v[3], v[0], v[5], v[1], v[4], v[2]};
  CHECK_THAT(pairwise_disagreement(p), WithinAbs(base, 1e-12));
}

TEST_CASE("identical experts integrate to zero disagreement") {
  Stream s(16);
  const auto e = affine_expert(random_mat(s, 2, 2), random_vec(s, 2), 0);
  RandomSystem sys{ensemble_of({e, e, e}), uniform_router(3, 2)};
  const auto rec = disagreement(recorded(sys, RoutingPolicy::top_k(2), vec({1, 1}), 8));
  CHECK(rec.D_int == 0.0);
  CHECK(rec.per_step_D.size() == 9);
  CHECK(integrate_over_time({1.0, 0.5, 0.0}, {2.0, 2.0, 2.0}) == 2.0);
}

TEST_CASE("alignment angles") {
  const Vec b = vec({1, 1});
  const auto r = alignment({vec({2, 2}), vec({1, -1}), vec({0, 0})}, b, {0});
  CHECK_THAT(r.per_expert[0].theta_deg, WithinAbs(0.0, 1e-5));
  CHECK(r.per_expert[0].selected);
  CHECK_THAT(r.per_expert[1].theta_deg, WithinAbs(90.0, 1e-12));
  CHECK_FALSE(r.per_expert[1].selected);
  CHECK_FALSE(r.per_expert[2].defined);
  Stream s(17);
  for (int i = 0; i < 50; ++i) {
    const Vec v = random_vec(s, 6);
    CHECK_THAT(alignment({v}, v, {0}).per_expert[0].cosine, WithinAbs(1.0, 1e-12));
  }
}

TEST_CASE("cluster rank of full routing is (K+1)/2") {
  const auto sys = random_system(8, 3, 18);
  Stream s(19);
  const Mat centroids = 3.0 * random_mat(s, 8, 3);
  const auto tr = recorded(sys, RoutingPolicy::full(), random_vec(s, 3), 20);
  const auto m = cluster_rank_metrics(tr, centroids);
  CHECK(m.mean_rank == 4.5);
  CHECK(m.probes.size() == 3);
  CHECK(m.top2_match_rate == 1.0);
  CHECK(m.top2_fraction == 0.25);
}

TEST_CASE("a nearest-centroid top-1 router has rank 1 everywhere") {
  Stream s(20);
  const Mat centroids = 4.0 * random_mat(s, 6, 3);
  const auto router = nearest_centroid_router(centroids);
  const auto sys = random_system(6, 3, 21);
  SamplerConfig cfg;
  cfg.N = 30;
  for (int i = 0; i < 10; ++i) {
    const auto tr = sample_trajectory(sys.ens, router, RoutingPolicy::top_k(1), random_vec(s, 3), cfg);
    const auto m = cluster_rank_metrics(tr, centroids, {0.1, 0.3, 0.5, 0.7, 0.9});
    CHECK(m.mean_rank == 1.0);
    CHECK(m.top2_match_rate == 1.0);
  }
}

TEST_CASE("nearest grid step for a probe time") {
  Trajectory tr;
  tr.N = 10;
  tr.times = time_grid(10);
  CHECK(nearest_step(tr, 0.3) == 7);
  CHECK(nearest_step(tr, 1.0) == 0);
  CHECK(nearest_step(tr, 0.0) == 10);
}

TEST_CASE("switching score examples and monotonicity") {
  CHECK_THAT(switching_score(2.0, 1.0), WithinAbs(2.0 / 1.001, 1e-15));
  CHECK_THAT(switching_score(2.0, 0.0), WithinAbs(2000.0, 1e-9));
  CHECK(switching_score(0.0, 0.5) == 0.0);
  for (double g = 0.1; g < 5; g += 0.37)
    for (double m = 0.0; m < 3; m += 0.29) {
      CHECK(switching_score(g + 0.1, m) > switching_score(g, m));
      CHECK(switching_score(g, m + 0.1) < switching_score(g, m));
    }
}

TEST_CASE("identical top experts never switch") {
  Stream s(22);
  const auto e = affine_expert(random_mat(s, 2, 2), random_vec(s, 2), 0);
  RandomSystem sys{ensemble_of({e, e, e, e}), {DenseNet::random({2 + 4, 8, 4}, 23), 2}};
  const auto rec = switching_metrics(recorded(sys, RoutingPolicy::top_k(2), vec({0.3, 0.4}), 10));
  CHECK(rec.S_eff == 0.0);
  CHECK(rec.g_max == 0.0);
  CHECK(rec.per_step.size() == 11);
}

TEST_CASE("failure flags use strict thresholds") {
  const auto th = FailureThresholds::paper8();
  auto f = failure_classify(30, 0.05, 2.0, th);
  CHECK(f.routing_uncertain);
  CHECK_FALSE(f.poor_convergence);
  CHECK_FALSE(f.high_leff);
  f = failure_classify(0, 0, 0, th);
  CHECK_FALSE((f.routing_uncertain || f.poor_convergence || f.high_leff));
  f = failure_classify(50.0, 0.1, 1.5, th);
  CHECK_FALSE((f.routing_uncertain || f.poor_convergence || f.high_leff));
  CHECK_THROWS_AS(failure_classify(1, 1, 1, {0.0, 1.0, 1.0}), ConfigError);
}

TEST_CASE("failure flags recomputed from stored scalars match") {
  Stream s(24);
  const auto th = FailureThresholds::paper8();
  for (int i = 0; i < 200; ++i) {
    const double L = 100 * s.uniform(), d = 0.2 * s.uniform(), H = 3 * s.uniform();
    const auto a = failure_classify(L, d, H, th);
    const auto b = failure_classify(L, d, H, a.thresholds);
    CHECK(a.routing_uncertain == b.routing_uncertain);
    CHECK(a.poor_convergence == b.poor_convergence);
    CHECK(a.high_leff == b.high_leff);
  }
}

TEST_CASE("percentile thresholds from top-2 runs") {
  std::vector<double> d(100), l(100);
  for (int i = 0; i < 100; ++i) {
    d[static_cast<std::size_t>(i)] = i;
    l[static_cast<std::size_t>(i)] = 2.0 * i;
  }
  const auto th = FailureThresholds::from_top2(d, l, 8);
  CHECK_THAT(th.delta_refine, WithinAbs(98.01, 1e-9));
  CHECK_THAT(th.leff, WithinAbs(196.02, 1e-9));
  CHECK_THAT(th.entropy_nats, WithinAbs(0.72 * std::log(8.0), 1e-15));
}

TEST_CASE("convergence probe on an exactly integrable field and with infinite tolerance") {
  const Vec x0 = vec({1.0, -1.0});
  auto field = [&](const Vec& x, double t) -> Vec { return (x - x0) / std::max(t, 1e-3); };
  auto exact = [&](const Vec& x1, int N, std::size_t) -> Vec {
    SamplerConfig cfg;
    cfg.N = N;
    cfg.solver = Solver::Euler;
    return integrate(field, x1, cfg).endpoint();
  };
  Stream s(25);
  std::vector<Vec> noise;
  for (int i = 0; i < 16; ++i) noise.push_back(random_vec(s, 2));
  for (const auto& lv : convergence_probe(exact, noise, 1e-9, {10, 20, 40})) CHECK(lv.exceed_fraction == 0.0);

  const auto sys = random_system(3, 2, 26);
  auto routed = [&](const Vec& x1, int N, std::size_t i) -> Vec {
    SamplerConfig cfg;
    cfg.N = N;
    cfg.record_decisions = false;
    return sample_trajectory(sys.ens, sys.router, RoutingPolicy::top_k(2), x1, cfg, i).endpoint();
  };
  for (const auto& lv : convergence_probe(routed, noise, std::numeric_limits<double>::infinity(), {5, 10})) CHECK(lv.exceed_fraction == 0.0);
  CHECK_THROWS_AS(convergence_probe(routed, noise, 0.1, {}), ConfigError);
}

TEST_CASE("maximum routing entropy along a trajectory") {
  const auto sys = random_system(4, 2, 27);
  const auto tr = recorded(sys, RoutingPolicy::full(1e6), vec({0, 0}), 5);
  CHECK_THAT(max_entropy(tr), WithinAbs(std::log(4.0), 1e-6));
}
