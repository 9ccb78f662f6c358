#pragma once

// Statistics used by the experiment reports.
//
// Percentiles use linear interpolation between order statistics (type 7):
// position (n - 1) q, interpolated between the bracketing sorted values.
// Student-t tails come from the regularized incomplete beta function
// evaluated with the modified Lentz continued fraction.

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <span>
#include <vector>

#include "ddmlab/errors.hpp"

namespace ddmlab::stats {

inline double mean(std::span<const double> v) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

/// Sample variance (n - 1 denominator); 0 for n < 2.
inline double variance(std::span<const double> v) {
  if (v.size() < 2) return 0.0;
  const double m = mean(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return s / static_cast<double>(v.size() - 1);
}

inline double stddev(std::span<const double> v) { return std::sqrt(variance(v)); }

/// Type-7 percentile, q in [0, 1].
inline double percentile(std::span<const double> v, double q) {
  if (v.empty()) throw ConfigError("percentile of an empty sample");
  std::vector<double> s(v.begin(), v.end());
  std::sort(s.begin(), s.end());
  const double pos = q * static_cast<double>(s.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, s.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return s[lo] + frac * (s[hi] - s[lo]);
}

struct SummaryStats {
  std::size_t n = 0;
  double mean = 0.0, std = 0.0, min = 0.0, max = 0.0;
  double p25 = 0.0, p50 = 0.0, p75 = 0.0, p90 = 0.0, p99 = 0.0;
};

inline SummaryStats summarize(std::span<const double> v) {
  SummaryStats s;
  s.n = v.size();
  if (v.empty()) return s;
  s.mean = stats::mean(v);
  s.std = stddev(v);
  const auto [mn, mx] = std::minmax_element(v.begin(), v.end());
  s.min = *mn;
  s.max = *mx;
  s.p25 = percentile(v, 0.25);
  s.p50 = percentile(v, 0.50);
  s.p75 = percentile(v, 0.75);
  s.p90 = percentile(v, 0.90);
  s.p99 = percentile(v, 0.99);
  return s;
}

/// 1-based ranks with ties replaced by their average rank.
inline std::vector<double> average_ranks(std::span<const double> v) {
  const std::size_t n = v.size();
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> r(n);
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && v[idx[j + 1]] == v[idx[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
    i = j + 1;
  }
  return r;
}

inline double pearson(std::span<const double> x, std::span<const double> y) {
  const double mx = mean(x), my = mean(y);
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return std::numeric_limits<double>::quiet_NaN();
  return sxy / std::sqrt(sxx * syy);
}

namespace detail {

// Continued fraction for the incomplete beta function (modified Lentz).
inline double betacf(double a, double b, double x) {
  constexpr int kMaxIter = 300;
  constexpr double kEps = 1e-15;
  constexpr double kTiny = 1e-300;
  const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
  double c = 1.0;
  double d = 1.0 - qab * x / qap;
  if (std::abs(d) < kTiny) d = kTiny;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= kMaxIter; ++m) {
    const double m2 = 2.0 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::abs(del - 1.0) < kEps) break;
  }
  return h;
}

}  // namespace detail

/// Regularized incomplete beta I_x(a, b).
inline double incomplete_beta(double a, double b, double x) {
  if (x <= 0.0) return 0.0;
  if (x >= 1.0) return 1.0;
  const double lbt = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) + b * std::log1p(-x);
  const double bt = std::exp(lbt);
  if (x < (a + 1.0) / (a + b + 2.0)) return bt * detail::betacf(a, b, x) / a;
  return 1.0 - bt * detail::betacf(b, a, 1.0 - x) / b;
}

/// Two-tailed p-value of a Student-t statistic with df degrees of freedom.
inline double student_t_two_tailed(double t, double df) {
  if (std::isnan(t)) return std::numeric_limits<double>::quiet_NaN();
  if (std::isinf(t)) return 0.0;
  return incomplete_beta(0.5 * df, 0.5, df / (df + t * t));
}

struct Correlation {
  double rho = std::numeric_limits<double>::quiet_NaN();
  double p = std::numeric_limits<double>::quiet_NaN();
  bool defined = false;
};

/// Spearman rank correlation (average ranks for ties) with a t-approximation p-value.
inline Correlation spearman(std::span<const double> xs, std::span<const double> ys) {
  if (xs.size() != ys.size()) throw ShapeError("spearman: length mismatch");
  if (xs.size() < 3) throw ConfigError("spearman: need at least 3 pairs");
  const auto rx = average_ranks(xs), ry = average_ranks(ys);
  Correlation c;
  c.rho = pearson(rx, ry);
  if (std::isnan(c.rho)) return c;
  c.defined = true;
  const double n = static_cast<double>(xs.size());
  if (std::abs(c.rho) >= 1.0) {
    c.p = 0.0;
  } else {
    const double t = c.rho * std::sqrt((n - 2.0) / (1.0 - c.rho * c.rho));
    c.p = student_t_two_tailed(t, n - 2.0);
  }
  return c;
}

struct AucResult {
  double value = std::numeric_limits<double>::quiet_NaN();
  bool defined = false;
};

/// Mann-Whitney AUC: P(score_pos > score_neg) + 0.5 P(tie).
inline AucResult auc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw ShapeError("auc: length mismatch");
  const auto r = average_ranks(scores);
  double rank_pos = 0.0;
  double n_pos = 0.0, n_neg = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] != 0) {
      rank_pos += r[i];
      n_pos += 1.0;
    } else {
      n_neg += 1.0;
    }
  }
  AucResult out;
  if (n_pos == 0.0 || n_neg == 0.0) return out;
  out.value = (rank_pos - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg);
  out.defined = true;
  return out;
}

struct TTest {
  double t = 0.0;
  double p = 1.0;
  double df = 0.0;
  bool zero_variance = false;
};

/// Welch (unpaired) or paired two-tailed t-test of mean(a) - mean(b).
inline TTest t_test(std::span<const double> a, std::span<const double> b, bool paired) {
  TTest r;
  if (paired) {
    if (a.size() != b.size()) throw ShapeError("paired t_test: length mismatch");
    if (a.size() < 2) throw ConfigError("t_test: need at least 2 pairs");
    std::vector<double> diff(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) diff[i] = a[i] - b[i];
    const double m = mean(diff);
    const double v = variance(diff);
    r.df = static_cast<double>(diff.size() - 1);
    if (v == 0.0) {
      r.zero_variance = true;
      r.t = m == 0.0 ? 0.0 : std::copysign(std::numeric_limits<double>::infinity(), m);
      r.p = m == 0.0 ? 1.0 : 0.0;
      return r;
    }
    r.t = m / std::sqrt(v / static_cast<double>(diff.size()));
  } else {
    if (a.size() < 2 || b.size() < 2) throw ConfigError("t_test: need at least 2 samples per group");
    const double na = static_cast<double>(a.size()), nb = static_cast<double>(b.size());
    const double va = variance(a) / na, vb = variance(b) / nb;
    const double m = mean(a) - mean(b);
    if (va + vb == 0.0) {
      r.zero_variance = true;
      r.t = m == 0.0 ? 0.0 : std::copysign(std::numeric_limits<double>::infinity(), m);
      r.p = m == 0.0 ? 1.0 : 0.0;
      r.df = na + nb - 2.0;
      return r;
    }
    r.t = m / std::sqrt(va + vb);
    r.df = (va + vb) * (va + vb) / (va * va / (na - 1.0) + vb * vb / (nb - 1.0));
  }
  r.p = student_t_two_tailed(r.t, r.df);
  return r;
}

/// Quartile bins 1..4 from the type-7 25/50/75 percentiles; a value equal to
/// a cut point goes to the lower bin.
inline std::vector<int> quartile_bin(std::span<const double> values) {
  if (values.size() < 4) throw ConfigError("quartile_bin: need at least 4 values");
  const double cuts[3] = {percentile(values, 0.25), percentile(values, 0.5), percentile(values, 0.75)};
  std::vector<int> bins(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    int b = 1;
    for (double c : cuts)
      if (values[i] > c) ++b;
    bins[i] = b;
  }
  return bins;
}

}  // namespace ddmlab::stats
