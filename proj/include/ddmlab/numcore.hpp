#pragma once

// Dense tanh networks with exact forward-mode (JVP) and reverse-mode (VJP)
// differentiation, plus power-iteration spectral-norm estimation over
// matrix-free linear maps.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "ddmlab/errors.hpp"
#include "ddmlab/rng.hpp"

namespace ddmlab {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

enum class Activation { Tanh };

inline std::string to_string(Activation) { return "tanh"; }

inline Activation activation_from_string(const std::string& s) {
  if (s == "tanh") return Activation::Tanh;
  throw FormatError("unknown activation tag '" + s + "'");
}

/// Parameter-shaped collection (one matrix and one bias vector per layer).
struct ParamSet {
  std::vector<Mat> weights;
  std::vector<Vec> biases;

  static ParamSet zeros_like(const std::vector<Mat>& w, const std::vector<Vec>& b) {
    ParamSet p;
    for (const auto& m : w) p.weights.push_back(Mat::Zero(m.rows(), m.cols()));
    for (const auto& v : b) p.biases.push_back(Vec::Zero(v.size()));
    return p;
  }

  double squared_norm() const {
    double s = 0.0;
    for (const auto& m : weights) s += m.squaredNorm();
    for (const auto& v : biases) s += v.squaredNorm();
    return s;
  }
};

/// Feed-forward network: tanh on hidden layers, identity on the output layer.
/// weights[l] has shape layer_dims[l+1] x layer_dims[l].
struct DenseNet {
  std::vector<int> layer_dims;
  std::vector<Mat> weights;
  std::vector<Vec> biases;
  Activation activation = Activation::Tanh;

  int input_dim() const { return layer_dims.front(); }
  int output_dim() const { return layer_dims.back(); }
  std::size_t num_layers() const { return weights.size(); }

  std::size_t num_params() const {
    std::size_t n = 0;
    for (std::size_t l = 0; l < weights.size(); ++l) n += weights[l].size() + biases[l].size();
    return n;
  }

  /// Throws ShapeError / DomainError when the invariants are violated.
  void validate() const {
    if (layer_dims.size() < 2) throw ShapeError("DenseNet needs at least two layer dims");
    for (int d : layer_dims)
      if (d <= 0) throw ShapeError("DenseNet layer dims must be positive");
    if (weights.size() != layer_dims.size() - 1 || biases.size() != weights.size())
      throw ShapeError("DenseNet tensor count does not match layer_dims");
    for (std::size_t l = 0; l < weights.size(); ++l) {
      if (weights[l].rows() != layer_dims[l + 1] || weights[l].cols() != layer_dims[l] ||
          biases[l].size() != layer_dims[l + 1])
        throw ShapeError("DenseNet layer " + std::to_string(l) + " shape mismatch");
      if (!weights[l].allFinite() || !biases[l].allFinite())
        throw DomainError("DenseNet layer " + std::to_string(l) + " has non-finite parameters");
    }
  }

  static DenseNet zeros(std::vector<int> dims) {
    DenseNet net;
    net.layer_dims = std::move(dims);
    for (std::size_t l = 0; l + 1 < net.layer_dims.size(); ++l) {
      net.weights.push_back(Mat::Zero(net.layer_dims[l + 1], net.layer_dims[l]));
      net.biases.push_back(Vec::Zero(net.layer_dims[l + 1]));
    }
    net.validate();
    return net;
  }

  /// LeCun-normal weights (std 1/sqrt(fan_in)), zero biases.
  static DenseNet random(std::vector<int> dims, std::uint64_t seed) {
    DenseNet net = zeros(std::move(dims));
    Stream rng(seed);
    for (auto& w : net.weights) {
      const double scale = 1.0 / std::sqrt(static_cast<double>(w.cols()));
      for (Eigen::Index i = 0; i < w.rows(); ++i)
        for (Eigen::Index j = 0; j < w.cols(); ++j) w(i, j) = scale * rng.normal();
    }
    return net;
  }

  ParamSet zero_grads() const { return ParamSet::zeros_like(weights, biases); }
};

namespace detail {

inline double tanh_scalar(double v) { return std::tanh(v); }

inline void check_input(const DenseNet& net, Eigen::Index n, const char* what) {
  if (n != net.input_dim())
    throw ShapeError(std::string(what) + ": expected length " + std::to_string(net.input_dim()) +
                     ", got " + std::to_string(n));
}

}  // namespace detail

inline Vec net_forward(const DenseNet& net, const Vec& input) {
  detail::check_input(net, input.size(), "net_forward input");
  Vec h = input;
  const std::size_t L = net.num_layers();
  for (std::size_t l = 0; l < L; ++l) {
    Vec a = net.weights[l] * h + net.biases[l];
    if (l + 1 < L) a = a.unaryExpr(&detail::tanh_scalar);
    h = std::move(a);
  }
  return h;
}

/// J * tangent by forward-mode propagation.
inline Vec net_jvp(const DenseNet& net, const Vec& input, const Vec& tangent) {
  detail::check_input(net, input.size(), "net_jvp input");
  detail::check_input(net, tangent.size(), "net_jvp tangent");
  Vec h = input;
  Vec dh = tangent;
  const std::size_t L = net.num_layers();
  for (std::size_t l = 0; l < L; ++l) {
    Vec a = net.weights[l] * h + net.biases[l];
    Vec da = net.weights[l] * dh;
    if (l + 1 < L) {
      a = a.unaryExpr(&detail::tanh_scalar);
      da = (1.0 - a.array().square()).matrix().cwiseProduct(da);
    }
    h = std::move(a);
    dh = std::move(da);
  }
  return dh;
}

struct VjpResult {
  Vec grad_input;
  ParamSet grad_params;
};

/// J^T * cotangent together with the parameter gradients of <output, cotangent>.
inline VjpResult net_vjp(const DenseNet& net, const Vec& input, const Vec& cotangent) {
  detail::check_input(net, input.size(), "net_vjp input");
  if (cotangent.size() != net.output_dim())
    throw ShapeError("net_vjp cotangent: expected length " + std::to_string(net.output_dim()));
  const std::size_t L = net.num_layers();
  std::vector<Vec> hs;
  hs.reserve(L + 1);
  hs.push_back(input);
  for (std::size_t l = 0; l < L; ++l) {
    Vec a = net.weights[l] * hs.back() + net.biases[l];
    if (l + 1 < L) a = a.unaryExpr(&detail::tanh_scalar);
    hs.push_back(std::move(a));
  }
  VjpResult out;
  out.grad_params = net.zero_grads();
  Vec g = cotangent;
  for (std::size_t l = L; l-- > 0;) {
    if (l + 1 < L) g = g.cwiseProduct((1.0 - hs[l + 1].array().square()).matrix());
    out.grad_params.weights[l].noalias() = g * hs[l].transpose();
    out.grad_params.biases[l] = g;
    g = net.weights[l].transpose() * g;
  }
  out.grad_input = std::move(g);
  return out;
}

/// Post-activation values of a batched forward pass; columns are samples.
struct BatchTape {
  std::vector<Mat> activations;  // activations[0] is the input batch
  const Mat& output() const { return activations.back(); }
};

inline BatchTape net_forward_batch(const DenseNet& net, const Mat& inputs) {
  if (inputs.rows() != net.input_dim()) throw ShapeError("net_forward_batch: input rows mismatch");
  const std::size_t L = net.num_layers();
  BatchTape tape;
  tape.activations.reserve(L + 1);
  tape.activations.push_back(inputs);
  for (std::size_t l = 0; l < L; ++l) {
    Mat a = net.weights[l] * tape.activations.back();
    a.colwise() += net.biases[l];
    if (l + 1 < L) a = a.unaryExpr(&detail::tanh_scalar);
    tape.activations.push_back(std::move(a));
  }
  return tape;
}

/// Parameter gradients summed over the batch, given dLoss/dOutput per column.
inline ParamSet net_backward_batch(const DenseNet& net, const BatchTape& tape, const Mat& d_output) {
  const std::size_t L = net.num_layers();
  ParamSet grads = net.zero_grads();
  Mat g = d_output;
  for (std::size_t l = L; l-- > 0;) {
    if (l + 1 < L) g = g.cwiseProduct((1.0 - tape.activations[l + 1].array().square()).matrix());
    grads.weights[l].noalias() = g * tape.activations[l].transpose();
    grads.biases[l] = g.rowwise().sum();
    if (l > 0) g = net.weights[l].transpose() * g;
  }
  return grads;
}

/// Matrix-free access to a square linear map and its adjoint.
struct LinearMapOracle {
  int dim = 0;
  std::function<Vec(const Vec&)> apply;
  std::function<Vec(const Vec&)> apply_adjoint;
};

inline LinearMapOracle matrix_oracle(Mat a) {
  if (a.rows() != a.cols()) throw ShapeError("matrix_oracle expects a square matrix");
  const int n = static_cast<int>(a.rows());
  auto shared = std::make_shared<Mat>(std::move(a));
  return {n, [shared](const Vec& u) -> Vec { return *shared * u; },
          [shared](const Vec& w) -> Vec { return shared->transpose() * w; }};
}

struct PowerIterConfig {
  std::pair<int, int> check_at{9, 10};
  double rel_tol = 0.005;
  int max_iter = 20;
  std::uint64_t seed = 0x5eed;

  void validate() const {
    if (!(rel_tol > 0.0 && rel_tol < 1.0)) throw ConfigError("PowerIterConfig: rel_tol must be in (0,1)");
    if (check_at.first < 1 || check_at.second <= check_at.first || check_at.second > max_iter)
      throw ConfigError("PowerIterConfig: need 1 <= check_at.first < check_at.second <= max_iter");
  }

  /// Fixed iteration count with no convergence test (used for the weight-clip aux norms).
  static PowerIterConfig fixed(int iterations, std::uint64_t seed) {
    PowerIterConfig c;
    c.max_iter = iterations;
    c.check_at = {iterations + 1, iterations + 2};
    c.seed = seed;
    return c;
  }
};

struct SpectralEstimate {
  double estimate = 0.0;
  int iterations = 0;
  bool converged = false;
};

/// Largest singular value by power iteration on A^T A.
///
/// The estimate after iteration k is ||A u_k||. The relative change between
/// iterations check_at.first and check_at.second is tested first; if it is
/// not below rel_tol, the test is repeated on each later pair until max_iter.
/// A start vector whose image is exactly zero is redrawn once; two zero images
/// mean the map is zero (estimate 0, converged). Non-finite images give
/// estimate 0, not converged.
inline SpectralEstimate spectral_norm(const LinearMapOracle& map, const PowerIterConfig& cfg) {
  if (map.dim < 1) throw ShapeError("spectral_norm: dim must be >= 1");
  const bool fixed_count = cfg.check_at.second > cfg.max_iter;
  if (!fixed_count) cfg.validate();

  Stream rng(cfg.seed);
  auto draw_unit = [&] {
    Vec u(map.dim);
    for (int i = 0; i < map.dim; ++i) u[i] = rng.normal();
    return Vec(u / u.norm());
  };

  Vec u = draw_unit();
  Vec au = map.apply(u);
  double sigma = au.norm();
  if (!(sigma > 0.0) || !std::isfinite(sigma)) {
    const bool first_zero = sigma == 0.0;
    u = draw_unit();
    au = map.apply(u);
    sigma = au.norm();
    if (!(sigma > 0.0) || !std::isfinite(sigma))
      return {0.0, 0, first_zero && sigma == 0.0};
  }

  SpectralEstimate out;
  double prev = 0.0;
  for (int it = 1; it <= cfg.max_iter; ++it) {
    if (it > 1) {
      au = map.apply(u);
      sigma = au.norm();
    }
    out.estimate = sigma;
    out.iterations = it;
    if (!std::isfinite(sigma)) return {0.0, it, false};
    if (!fixed_count && it >= cfg.check_at.second) {
      const double rel = sigma > 0.0 ? std::abs(sigma - prev) / sigma : 0.0;
      if (rel < cfg.rel_tol) {
        out.converged = true;
        return out;
      }
    }
    if (it == cfg.max_iter) break;
    Vec w = map.apply_adjoint(au);
    const double nw = w.norm();
    if (nw == 0.0) {
      out.converged = true;
      return out;
    }
    u = w / nw;
    prev = sigma;
  }
  out.converged = fixed_count;
  return out;
}

}  // namespace ddmlab
