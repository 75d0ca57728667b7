#pragma once

#include <cmath>
#include <map>
#include <string>

#include "crossret/autodiff.hpp"

namespace crossret {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 0.0;  ///< optional L2 coefficient added to the gradient
};

/// Adam with bias correction. Moment state is kept per parameter name.
class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

  /// Updates every parameter in `params` that has an entry in `grads`.
  void step(ParamStore& params, const ParamStore& grads, double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (const auto& [name, g0] : grads) {
      auto pit = params.find(name);
      if (pit == params.end()) continue;
      Matrix& p = pit->second;
      Matrix g = g0;
      if (cfg_.weight_decay != 0.0) g += cfg_.weight_decay * p;
      auto [mit, _] = m_.try_emplace(name, Matrix::Zero(p.rows(), p.cols()));
      auto [vit, __] = v_.try_emplace(name, Matrix::Zero(p.rows(), p.cols()));
      Matrix& m = mit->second;
      Matrix& v = vit->second;
      m = cfg_.beta1 * m + (1.0 - cfg_.beta1) * g;
      v = cfg_.beta2 * v + (1.0 - cfg_.beta2) * g.cwiseProduct(g);
      if (lr == 0.0) continue;
      p.array() -= lr * (m.array() / bc1) / ((v.array() / bc2).sqrt() + cfg_.epsilon);
    }
  }

  long steps() const noexcept { return t_; }

 private:
  AdamConfig cfg_;
  long t_ = 0;
  std::map<std::string, Matrix> m_;
  std::map<std::string, Matrix> v_;
};

}  // namespace crossret
