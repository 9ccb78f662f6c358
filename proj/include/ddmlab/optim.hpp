#pragma once

#include <cmath>

#include "ddmlab/numcore.hpp"

namespace ddmlab {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam with bias correction, applied in place to a DenseNet.
class Adam {
 public:
  Adam(const DenseNet& net, AdamConfig cfg) : cfg_(cfg), m_(net.zero_grads()), v_(net.zero_grads()) {}

  void step(DenseNet& net, const ParamSet& grad) {
    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t l = 0; l < net.weights.size(); ++l) {
      update(net.weights[l], m_.weights[l], v_.weights[l], grad.weights[l], c1, c2);
      update(net.biases[l], m_.biases[l], v_.biases[l], grad.biases[l], c1, c2);
    }
  }

  long steps() const { return t_; }

 private:
  template <class P, class G>
  void update(P& p, P& m, P& v, const G& g, double c1, double c2) const {
    m = cfg_.beta1 * m + (1.0 - cfg_.beta1) * g;
    v = cfg_.beta2 * v + (1.0 - cfg_.beta2) * g.cwiseProduct(g);
    p.array() -= cfg_.lr * (m.array() / c1) / ((v.array() / c2).sqrt() + cfg_.eps);
  }

  AdamConfig cfg_;
  ParamSet m_;
  ParamSet v_;
  long t_ = 0;
};

}  // namespace ddmlab
