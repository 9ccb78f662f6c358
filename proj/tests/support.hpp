#pragma once

// Small fixtures shared by the unit tests.

#include <cmath>
#include <vector>

#include "ddmlab/flowexperts.hpp"
#include "ddmlab/router.hpp"

namespace testing {

using namespace ddmlab;

inline Vec vec(std::initializer_list<double> xs) {
  Vec v(static_cast<Eigen::Index>(xs.size()));
  Eigen::Index i = 0;
  for (double x : xs) v[i++] = x;
  return v;
}

inline Vec random_vec(Stream& s, int n) {
  Vec v(n);
  for (int i = 0; i < n; ++i) v[i] = s.normal();
  return v;
}

inline Mat random_mat(Stream& s, int r, int c) {
  Mat m(r, c);
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) m(i, j) = s.normal();
  return m;
}

/// Expert whose velocity is A x + c, independent of t.
inline Expert affine_expert(const Mat& A, const Vec& c, int k, int m = 2) {
  const int d = static_cast<int>(A.rows());
  Expert e;
  e.net = DenseNet::zeros({d + 2 * m, d});
  e.net.weights[0].leftCols(d) = A;
  e.net.biases[0] = c;
  e.cluster_id = k;
  e.time_features = m;
  return e;
}

inline ExpertEnsemble ensemble_of(std::vector<Expert> experts) {
  ExpertEnsemble ens;
  ens.d = experts.front().dim();
  for (std::size_t k = 0; k < experts.size(); ++k) experts[k].cluster_id = static_cast<int>(k);
  ens.experts = std::move(experts);
  ens.validate();
  return ens;
}

/// Router whose logits are 2 c_k.x - |c_k|^2: softmax favours the nearest centroid.
inline Router nearest_centroid_router(const Mat& centroids, int m = 2, double sharpness = 1.0) {
  const int K = static_cast<int>(centroids.rows()), d = static_cast<int>(centroids.cols());
  Router r{DenseNet::zeros({d + 2 * m, K}), m};
  r.net.weights[0].leftCols(d) = 2.0 * sharpness * centroids;
  for (int k = 0; k < K; ++k) r.net.biases[0][k] = -sharpness * centroids.row(k).squaredNorm();
  return r;
}

/// Router with zero weights: uniform probabilities everywhere.
inline Router uniform_router(int K, int d, int m = 2) { return {DenseNet::zeros({d + 2 * m, K}), m}; }

/// A small random tanh ensemble and router for Jacobian identities.
struct RandomSystem {
  ExpertEnsemble ens;
  Router router;
};

inline RandomSystem random_system(int K, int d, std::uint64_t seed, int m = 2) {
  RandomSystem s;
  std::vector<Expert> ex;
  for (int k = 0; k < K; ++k) {
    Expert e;
    e.net = DenseNet::random({d + 2 * m, 16, d}, derive_seed(seed, "test-expert", static_cast<std::uint64_t>(k)));
    e.time_features = m;
    ex.push_back(std::move(e));
  }
  s.ens = ensemble_of(std::move(ex));
  s.router = {DenseNet::random({d + 2 * m, 16, K}, derive_seed(seed, "test-router")), m};
  return s;
}

/// Dense Jacobian of a map by central differences.
template <class F>
Mat fd_jacobian(F&& f, const Vec& x, double h = 1e-5) {
  const Vec f0 = f(x);
  Mat J(f0.size(), x.size());
  for (Eigen::Index j = 0; j < x.size(); ++j) {
    Vec a = x, b = x;
    a[j] += h;
    b[j] -= h;
    J.col(j) = (f(a) - f(b)) / (2 * h);
  }
  return J;
}

inline Mat dense(const LinearMapOracle& m) {
  Mat J(m.dim, m.dim);
  for (int j = 0; j < m.dim; ++j) J.col(j) = m.apply(Vec::Unit(m.dim, j));
  return J;
}

}  // namespace testing
