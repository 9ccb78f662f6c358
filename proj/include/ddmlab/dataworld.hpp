#pragma once

// Clustered synthetic data: Gaussian blobs on hypercube vertices, k-means
// partitioning, centroid-distance ranking and the generating-mixture NLL.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numbers>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "ddmlab/errors.hpp"
#include "ddmlab/numcore.hpp"
#include "ddmlab/rng.hpp"

namespace ddmlab {

struct Dataset {
  Mat points;                 // n x d
  std::vector<int> labels;    // n entries in [0, K)
  int K = 0;
  int d = 0;
  Mat centroids;              // K x d, mean of the points carrying each label
  double separation = 0.0;    // min generator-mean distance / within-cluster std
  std::uint64_t seed = 0;
  Mat mixture_means;          // K x d generator means (unit-variance isotropic components)

  Eigen::Index size() const { return points.rows(); }

  /// Rows whose label equals k, copied into a fresh matrix.
  Mat cluster_points(int k) const {
    std::vector<Eigen::Index> rows;
    for (Eigen::Index i = 0; i < size(); ++i)
      if (labels[static_cast<std::size_t>(i)] == k) rows.push_back(i);
    Mat out(static_cast<Eigen::Index>(rows.size()), d);
    for (std::size_t r = 0; r < rows.size(); ++r) out.row(static_cast<Eigen::Index>(r)) = points.row(rows[r]);
    return out;
  }

  std::vector<int> label_counts() const {
    std::vector<int> c(static_cast<std::size_t>(K), 0);
    for (int l : labels) ++c[static_cast<std::size_t>(l)];
    return c;
  }
};

/// Per-label means; labels without points keep a zero row.
inline Mat label_means(const Mat& points, const std::vector<int>& labels, int K) {
  Mat sums = Mat::Zero(K, points.cols());
  std::vector<int> counts(static_cast<std::size_t>(K), 0);
  for (Eigen::Index i = 0; i < points.rows(); ++i) {
    const int l = labels[static_cast<std::size_t>(i)];
    sums.row(l) += points.row(i);
    ++counts[static_cast<std::size_t>(l)];
  }
  for (int k = 0; k < K; ++k)
    if (counts[static_cast<std::size_t>(k)] > 0) sums.row(k) /= counts[static_cast<std::size_t>(k)];
  return sums;
}

inline double min_pairwise_distance(const Mat& c) {
  double best = std::numeric_limits<double>::infinity();
  for (Eigen::Index i = 0; i < c.rows(); ++i)
    for (Eigen::Index j = i + 1; j < c.rows(); ++j) best = std::min(best, (c.row(i) - c.row(j)).norm());
  return best;
}

/// K unit-variance isotropic Gaussian blobs whose means are distinct hypercube
/// vertices drawn from the seeded stream, scaled so that the minimum pairwise
/// mean distance equals `separation`. All means share the same norm.
inline Dataset generate_mixture(std::uint64_t seed, int K, int d, int n_per_cluster, double separation) {
  if (K < 2) throw ConfigError("generate_mixture: K must be >= 2");
  if (d < 2) throw ConfigError("generate_mixture: d must be >= 2");
  if (n_per_cluster < 8) throw ConfigError("generate_mixture: n_per_cluster must be >= 8");
  if (!(separation > 0.0)) throw ConfigError("generate_mixture: separation must be > 0");

  Stream placement(derive_seed(seed, "centroids"));
  std::set<std::vector<int>> seen;
  std::vector<std::vector<int>> vertices;
  int rejections = 0;
  while (static_cast<int>(vertices.size()) < K) {
    std::vector<int> v(static_cast<std::size_t>(d));
    for (auto& s : v) s = (placement.next_u64() >> 63) ? 1 : -1;
    if (seen.insert(v).second) {
      vertices.push_back(std::move(v));
    } else if (++rejections > 1000) {
      throw ConfigError("generate_mixture: could not place " + std::to_string(K) +
                        " distinct centroids in dimension " + std::to_string(d) +
                        " after 1000 rejections (K must be <= 2^d)");
    }
  }

  Mat means(K, d);
  for (int k = 0; k < K; ++k)
    for (int j = 0; j < d; ++j) means(k, j) = vertices[static_cast<std::size_t>(k)][static_cast<std::size_t>(j)];
  means *= separation / min_pairwise_distance(means);

  Dataset ds;
  ds.K = K;
  ds.d = d;
  ds.seed = seed;
  ds.separation = separation;
  ds.mixture_means = means;
  ds.points.resize(static_cast<Eigen::Index>(K) * n_per_cluster, d);
  ds.labels.resize(static_cast<std::size_t>(K) * static_cast<std::size_t>(n_per_cluster));
  Stream noise(derive_seed(seed, "points"));
  for (int k = 0; k < K; ++k) {
    for (int i = 0; i < n_per_cluster; ++i) {
      const Eigen::Index row = static_cast<Eigen::Index>(k) * n_per_cluster + i;
      for (int j = 0; j < d; ++j) ds.points(row, j) = means(k, j) + noise.normal();
      ds.labels[static_cast<std::size_t>(row)] = k;
    }
  }
  ds.centroids = label_means(ds.points, ds.labels, K);
  return ds;
}

struct KMeansResult {
  std::vector<int> labels;
  Mat centroids;
  int iterations = 0;                  // centroid updates performed
  std::vector<double> inertia_history; // after each update
};

namespace detail {

inline int nearest_centroid(const Mat& points, Eigen::Index i, const Mat& centroids, double* dist2 = nullptr) {
  int best = 0;
  double bd = std::numeric_limits<double>::infinity();
  for (Eigen::Index k = 0; k < centroids.rows(); ++k) {
    const double dd = (points.row(i) - centroids.row(k)).squaredNorm();
    if (dd < bd) {
      bd = dd;
      best = static_cast<int>(k);
    }
  }
  if (dist2) *dist2 = bd;
  return best;
}

inline double inertia(const Mat& points, const std::vector<int>& labels, const Mat& centroids) {
  double s = 0.0;
  for (Eigen::Index i = 0; i < points.rows(); ++i)
    s += (points.row(i) - centroids.row(labels[static_cast<std::size_t>(i)])).squaredNorm();
  return s;
}

}  // namespace detail

/// Lloyd iterations from a seeded k-means++ initialisation, run until the
/// assignment stops changing or max_iter updates have been made. An empty
/// cluster takes the point farthest from its centroid in the largest cluster.
inline KMeansResult kmeans_partition(const Mat& points, int K, std::uint64_t seed, int max_iter = 100) {
  const Eigen::Index n = points.rows();
  if (K < 1 || n < K) throw ConfigError("kmeans_partition: need 1 <= K <= n");

  Stream rng(derive_seed(seed, "kmeans++"));
  Mat centroids(K, points.cols());
  centroids.row(0) = points.row(static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(n))));
  std::vector<double> d2(static_cast<std::size_t>(n));
  for (int k = 1; k < K; ++k) {
    double total = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      double best = std::numeric_limits<double>::infinity();
      for (int c = 0; c < k; ++c) best = std::min(best, (points.row(i) - centroids.row(c)).squaredNorm());
      d2[static_cast<std::size_t>(i)] = best;
      total += best;
    }
    Eigen::Index pick = 0;
    if (total > 0.0) {
      double r = rng.uniform() * total;
      pick = n - 1;
      for (Eigen::Index i = 0; i < n; ++i) {
        r -= d2[static_cast<std::size_t>(i)];
        if (r < 0.0) {
          pick = i;
          break;
        }
      }
    } else {
      pick = static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(n)));
    }
    centroids.row(k) = points.row(pick);
  }

  KMeansResult res;
  res.labels.assign(static_cast<std::size_t>(n), -1);
  for (int iter = 0; iter < max_iter; ++iter) {
    std::vector<int> assign(static_cast<std::size_t>(n));
    for (Eigen::Index i = 0; i < n; ++i) assign[static_cast<std::size_t>(i)] = detail::nearest_centroid(points, i, centroids);

    // Repair empty clusters.
    for (int k = 0; k < K; ++k) {
      std::vector<int> counts(static_cast<std::size_t>(K), 0);
      for (int a : assign) ++counts[static_cast<std::size_t>(a)];
      if (counts[static_cast<std::size_t>(k)] > 0) continue;
      const int largest = static_cast<int>(std::max_element(counts.begin(), counts.end()) - counts.begin());
      Eigen::Index far = -1;
      double fd = -1.0;
      for (Eigen::Index i = 0; i < n; ++i) {
        if (assign[static_cast<std::size_t>(i)] != largest) continue;
        const double dd = (points.row(i) - centroids.row(largest)).squaredNorm();
        if (dd > fd) {
          fd = dd;
          far = i;
        }
      }
      assign[static_cast<std::size_t>(far)] = k;
    }

    if (assign == res.labels) break;
    res.labels = std::move(assign);
    centroids = label_means(points, res.labels, K);
    ++res.iterations;
    res.inertia_history.push_back(detail::inertia(points, res.labels, centroids));
  }
  res.centroids = centroids;
  return res;
}

/// Replaces the dataset labels with a k-means partition and recomputes centroids.
inline Dataset partition_dataset(Dataset ds, std::uint64_t seed, int max_iter = 100) {
  auto km = kmeans_partition(ds.points, ds.K, seed, max_iter);
  ds.labels = std::move(km.labels);
  ds.centroids = label_means(ds.points, ds.labels, ds.K);
  return ds;
}

struct ClusterRankResult {
  std::vector<double> distances;  // per cluster
  std::vector<int> ranks;         // per cluster, 1 = closest
  std::vector<int> order;         // cluster indices sorted closest first
};

/// Euclidean distances to every centroid; ties rank the lower cluster index first.
inline ClusterRankResult cluster_rank(const Vec& x, const Mat& centroids) {
  if (x.size() != centroids.cols()) throw ShapeError("cluster_rank: dimension mismatch");
  const auto K = static_cast<std::size_t>(centroids.rows());
  ClusterRankResult r;
  r.distances.resize(K);
  for (std::size_t k = 0; k < K; ++k) r.distances[k] = (x.transpose() - centroids.row(static_cast<Eigen::Index>(k))).norm();
  r.order.resize(K);
  std::iota(r.order.begin(), r.order.end(), 0);
  std::stable_sort(r.order.begin(), r.order.end(),
                   [&](int a, int b) { return r.distances[static_cast<std::size_t>(a)] < r.distances[static_cast<std::size_t>(b)]; });
  r.ranks.resize(K);
  for (std::size_t i = 0; i < K; ++i) r.ranks[static_cast<std::size_t>(r.order[i])] = static_cast<int>(i) + 1;
  return r;
}

/// -log p(x) under the equal-weight mixture of N(mean_k, I).
inline double mixture_nll(const Vec& x, const Mat& means) {
  const auto K = means.rows();
  const double d = static_cast<double>(means.cols());
  double mx = -std::numeric_limits<double>::infinity();
  std::vector<double> lp(static_cast<std::size_t>(K));
  for (Eigen::Index k = 0; k < K; ++k) {
    lp[static_cast<std::size_t>(k)] = -0.5 * (x.transpose() - means.row(k)).squaredNorm();
    mx = std::max(mx, lp[static_cast<std::size_t>(k)]);
  }
  double s = 0.0;
  for (double v : lp) s += std::exp(v - mx);
  const double log_density = mx + std::log(s) - std::log(static_cast<double>(K)) - 0.5 * d * std::log(2.0 * std::numbers::pi);
  return -log_density;
}

// ---------------------------------------------------------------------------
// CSV (x_0,...,x_{d-1},label) plus JSON sidecar (K, d, seed, separation,
// centroids, mixture_means).

namespace detail {
inline std::string fmt17(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

inline nlohmann::json matrix_to_json(const Mat& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    nlohmann::json r = nlohmann::json::array();
    for (Eigen::Index j = 0; j < m.cols(); ++j) r.push_back(m(i, j));
    rows.push_back(std::move(r));
  }
  return rows;
}

inline Mat matrix_from_json(const nlohmann::json& j) {
  const auto rows = static_cast<Eigen::Index>(j.size());
  const auto cols = rows > 0 ? static_cast<Eigen::Index>(j[0].size()) : 0;
  Mat m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    if (static_cast<Eigen::Index>(j[static_cast<std::size_t>(i)].size()) != cols) throw FormatError("ragged matrix in JSON");
    for (Eigen::Index k = 0; k < cols; ++k) m(i, k) = j[static_cast<std::size_t>(i)][static_cast<std::size_t>(k)].get<double>();
  }
  return m;
}
}  // namespace detail

inline std::string dataset_csv(const Dataset& ds) {
  std::ostringstream os;
  for (int j = 0; j < ds.d; ++j) os << "x_" << j << ',';
  os << "label\n";
  for (Eigen::Index i = 0; i < ds.size(); ++i) {
    for (int j = 0; j < ds.d; ++j) os << detail::fmt17(ds.points(i, j)) << ',';
    os << ds.labels[static_cast<std::size_t>(i)] << '\n';
  }
  return os.str();
}

inline nlohmann::json dataset_sidecar(const Dataset& ds) {
  return {{"K", ds.K},
          {"d", ds.d},
          {"seed", ds.seed},
          {"separation", ds.separation},
          {"n", ds.size()},
          {"centroids", detail::matrix_to_json(ds.centroids)},
          {"mixture_means", detail::matrix_to_json(ds.mixture_means)}};
}

/// Writes <stem>.csv and <stem>.json.
inline void save_dataset(const Dataset& ds, const std::filesystem::path& stem) {
  if (stem.has_parent_path()) std::filesystem::create_directories(stem.parent_path());
  std::ofstream csv(stem.string() + ".csv", std::ios::binary);
  csv << dataset_csv(ds);
  std::ofstream js(stem.string() + ".json", std::ios::binary);
  js << dataset_sidecar(ds).dump(2) << '\n';
  if (!csv || !js) throw Error("failed to write dataset at " + stem.string());
}

inline Dataset load_dataset(const std::filesystem::path& stem) {
  std::ifstream js(stem.string() + ".json");
  std::ifstream csv(stem.string() + ".csv");
  if (!js || !csv) throw Error("dataset not found at " + stem.string() + ".{csv,json}");
  const auto meta = nlohmann::json::parse(js);
  Dataset ds;
  ds.K = meta.at("K").get<int>();
  ds.d = meta.at("d").get<int>();
  ds.seed = meta.at("seed").get<std::uint64_t>();
  ds.separation = meta.at("separation").get<double>();
  ds.centroids = detail::matrix_from_json(meta.at("centroids"));
  ds.mixture_means = detail::matrix_from_json(meta.at("mixture_means"));

  std::string line;
  std::getline(csv, line);
  const int expected_cols = ds.d + 1;
  if (std::count(line.begin(), line.end(), ',') + 1 != expected_cols) throw FormatError("dataset CSV header has wrong column count");
  std::vector<std::vector<double>> rows;
  while (std::getline(csv, line)) {
    if (line.empty()) continue;
    std::vector<double> r;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) r.push_back(std::stod(cell));
    if (static_cast<int>(r.size()) != expected_cols) throw FormatError("dataset CSV row has wrong column count");
    rows.push_back(std::move(r));
  }
  ds.points.resize(static_cast<Eigen::Index>(rows.size()), ds.d);
  ds.labels.resize(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (int j = 0; j < ds.d; ++j) ds.points(static_cast<Eigen::Index>(i), j) = rows[i][static_cast<std::size_t>(j)];
    const int l = static_cast<int>(rows[i].back());
    if (l < 0 || l >= ds.K) throw FormatError("dataset label out of range");
    ds.labels[i] = l;
  }
  return ds;
}

}  // namespace ddmlab
