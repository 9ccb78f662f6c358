#include "catch_amalgamated.hpp"

#include <boost/math/distributions/students_t.hpp>

#include "ddmlab/rng.hpp"
#include "ddmlab/stats.hpp"

using namespace ddmlab;
using Catch::Matchers::WithinAbs;
using Catch::Matchers::WithinRel;

namespace {

double boost_two_tailed(double t, double df) {
  boost::math::students_t dist(df);
  return 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(t)));
}

std::vector<double> normals(Stream& s, int n, double mu) {
  std::vector<double> v(static_cast<std::size_t>(n));
  for (auto& x : v) x = mu + s.normal();
  return v;
}

}  // namespace

TEST_CASE("spearman examples") {
  const std::vector<double> x{1, 2, 3}, y{10, 20, 30}, r{30, 20, 10};
  CHECK_THAT(stats::spearman(x, y).rho, WithinAbs(1.0, 1e-15));
  CHECK_THAT(stats::spearman(x, r).rho, WithinAbs(-1.0, 1e-15));
  const std::vector<double> xt{1, 1, 2, 3}, yt{2, 2, 4, 6};
  CHECK_THAT(stats::spearman(xt, yt).rho, WithinAbs(1.0, 1e-15));
  const std::vector<double> flat{5, 5, 5};
  CHECK_FALSE(stats::spearman(x, flat).defined);
  CHECK_THROWS_AS(stats::spearman(std::vector<double>{1, 2}, std::vector<double>{1, 2}), ConfigError);
}

TEST_CASE("spearman ignores strictly monotone transforms") {
  Stream s(1);
  const auto x = normals(s, 50, 0), y = normals(s, 50, 0);
  const double base = stats::spearman(x, y).rho;
  std::vector<double> ex, cy;
  for (double v : x) ex.push_back(std::exp(v));
  for (double v : y) cy.push_back(v * v * v + 2 * v);
  CHECK_THAT(stats::spearman(ex, cy).rho, WithinAbs(base, 1e-12));
}

TEST_CASE("spearman p-value matches the t approximation computed with Boost") {
  Stream s(2);
  const auto x = normals(s, 30, 0);
  auto y = normals(s, 30, 0);
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += 0.5 * x[i];
  const auto c = stats::spearman(x, y);
  const double t = c.rho * std::sqrt(28.0 / (1 - c.rho * c.rho));
  CHECK_THAT(c.p, WithinRel(boost_two_tailed(t, 28.0), 1e-9));
}

TEST_CASE("auc examples") {
  CHECK(stats::auc(std::vector<double>{0.9, 0.1}, std::vector<int>{1, 0}).value == 1.0);
  CHECK(stats::auc(std::vector<double>{0.3, 0.3, 0.3, 0.3}, std::vector<int>{1, 0, 1, 0}).value == 0.5);
  CHECK_FALSE(stats::auc(std::vector<double>{0.1, 0.2}, std::vector<int>{1, 1}).defined);
}

TEST_CASE("auc of random scores is one half and complements sum to 1") {
  Stream s(3);
  std::vector<double> scores(10000);
  std::vector<int> labels(10000), flipped(10000);
  for (std::size_t i = 0; i < scores.size(); ++i) {
    scores[i] = s.uniform();
    labels[i] = static_cast<int>(s.below(2));
    flipped[i] = 1 - labels[i];
  }
  const double a = stats::auc(scores, labels).value;
  CHECK_THAT(a, WithinAbs(0.5, 0.02));
  CHECK_THAT(a + stats::auc(scores, flipped).value, WithinAbs(1.0, 1e-12));
}

TEST_CASE("t-test with identical paired samples is flagged zero-variance") {
  const std::vector<double> a{1, 2, 3, 4};
  const auto r = stats::t_test(a, a, true);
  CHECK(r.zero_variance);
  CHECK(r.t == 0.0);
  CHECK(r.p == 1.0);
  const std::vector<double> c{5, 5, 5};
  CHECK(stats::t_test(c, c, false).zero_variance);
}

TEST_CASE("t-test detects a one-sigma shift with 200 samples") {
  Stream s(4);
  const auto a = normals(s, 200, 1.0), b = normals(s, 200, 0.0);
  for (bool paired : {false, true}) {
    const auto r = stats::t_test(a, b, paired);
    CHECK(r.p < 1e-10);
    CHECK(r.t > 0);
  }
}

TEST_CASE("swapping samples negates t and keeps p") {
  Stream s(5);
  const auto a = normals(s, 25, 0.3), b = normals(s, 25, 0.0);
  for (bool paired : {false, true}) {
    const auto ab = stats::t_test(a, b, paired), ba = stats::t_test(b, a, paired);
    CHECK(ab.t == -ba.t);
    CHECK(ab.p == ba.p);
  }
}

TEST_CASE("t-test p-values agree with Boost's Student t") {
  Stream s(6);
  for (int n : {3, 5, 10, 40}) {
    const auto a = normals(s, n, 0.4), b = normals(s, n, 0.0);
    for (bool paired : {false, true}) {
      const auto r = stats::t_test(a, b, paired);
      CHECK_THAT(r.p, WithinRel(boost_two_tailed(r.t, r.df), 1e-9));
    }
  }
  for (double df : {1.0, 2.5, 7.0, 120.0})
    for (double t : {0.0, 0.3, 1.7, 4.0, 12.0}) CHECK_THAT(stats::student_t_two_tailed(t, df), WithinRel(boost_two_tailed(t, df), 1e-9));
}

TEST_CASE("Welch degrees of freedom") {
  const std::vector<double> a{1, 2, 3, 4, 5}, b{2, 4, 6, 8, 10, 12, 14};
  const double va = 2.5 / 5, vb = 18.666666666666668 / 7;
  CHECK_THAT(stats::t_test(a, b, false).df, WithinRel((va + vb) * (va + vb) / (va * va / 4 + vb * vb / 6), 1e-12));
}

TEST_CASE("quartile bins") {
  const std::vector<double> v{1, 2, 3, 4, 5, 6, 7, 8};
  CHECK(stats::quartile_bin(v) == std::vector<int>{1, 1, 2, 2, 3, 3, 4, 4});
  const std::vector<double> flat(9, 2.0);
  for (int b : stats::quartile_bin(flat)) CHECK(b == 1);
  Stream s(7);
  for (int n : {4, 9, 17, 100, 101}) {
    const auto x = normals(s, n, 0);
    const auto bins = stats::quartile_bin(x);
    int counts[4] = {0, 0, 0, 0};
    for (int b : bins) counts[b - 1]++;
    CHECK(*std::max_element(counts, counts + 4) - *std::min_element(counts, counts + 4) <= 1);
  }
  CHECK_THROWS_AS(stats::quartile_bin(std::vector<double>{1, 2, 3}), ConfigError);
}

TEST_CASE("type-7 percentiles") {
  const std::vector<double> v{10, 20, 30, 40};
  CHECK(stats::percentile(v, 0.0) == 10);
  CHECK(stats::percentile(v, 1.0) == 40);
  CHECK_THAT(stats::percentile(v, 0.5), WithinAbs(25, 1e-12));
  CHECK_THAT(stats::percentile(v, 0.25), WithinAbs(17.5, 1e-12));
  CHECK_THAT(stats::percentile(v, 0.99), WithinAbs(39.7, 1e-12));
}

TEST_CASE("summary of a constant sequence") {
  const std::vector<double> c(11, 3.25);
  const auto s = stats::summarize(c);
  CHECK(s.std == 0.0);
  for (double p : {s.min, s.max, s.p25, s.p50, s.p75, s.p90, s.p99, s.mean}) CHECK(p == 3.25);
  CHECK(s.n == 11);
}

TEST_CASE("average ranks and pearson") {
  const std::vector<double> v{3, 1, 3, 2};
  CHECK(stats::average_ranks(v) == std::vector<double>{3.5, 1, 3.5, 2});
  const std::vector<double> x{1, 2, 3, 4}, y{2, 4, 6, 8.5};
  CHECK(stats::pearson(x, y) > 0.99);
}
