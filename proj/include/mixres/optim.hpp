#pragma once

#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "mixres/errors.hpp"
#include "mixres/tensor.hpp"

namespace mixres {

struct SgdConfig {
  double lr = 0.05;
  double momentum = 0.9;
  double weight_decay = 5e-4;

  void validate() const {
    if (!(lr >= 0)) throw ConfigError("lr must be >= 0");
    if (!(momentum >= 0 && momentum < 1)) throw ConfigError("momentum must lie in [0, 1)");
    if (!(weight_decay >= 0)) throw ConfigError("weight_decay must be >= 0");
  }
};

/// SGD with heavy-ball momentum and L2 weight decay folded into the gradient:
///   v <- momentum * v + g + weight_decay * w
///   w <- w - lr * v
template <class T>
class Sgd {
 public:
  Sgd(std::vector<Tensor<T>> params, SgdConfig config) : params_(std::move(params)), config_(config) {
    config_.validate();
    velocity_.reserve(params_.size());
    for (const auto& p : params_) velocity_.emplace_back(p.numel(), T(0));
  }

  void set_lr(double lr) {
    if (!(lr >= 0)) throw ConfigError("lr must be >= 0");
    config_.lr = lr;
  }
  double lr() const { return config_.lr; }
  const SgdConfig& config() const { return config_; }

  void step() {
    const T lr = static_cast<T>(config_.lr), mom = static_cast<T>(config_.momentum),
            wd = static_cast<T>(config_.weight_decay);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = params_[i];
      if (!p.has_grad()) throw UsageError("sgd_step: parameter " + std::to_string(i) + " has no gradient");
      auto w = p.data();
      auto g = p.grad();
      auto& v = velocity_[i];
      for (std::size_t j = 0; j < w.size(); ++j) {
        v[j] = mom * v[j] + g[j] + wd * w[j];
        w[j] -= lr * v[j];
      }
    }
  }

  std::vector<std::vector<T>>& velocity() { return velocity_; }
  const std::vector<std::vector<T>>& velocity() const { return velocity_; }

 private:
  std::vector<Tensor<T>> params_;
  std::vector<std::vector<T>> velocity_;
  SgdConfig config_;
};

struct CosineSchedule {
  double eta_max = 0.05;
  double eta_min = 0.0;
  int t_max = 200;

  void validate() const {
    if (!(eta_min >= 0)) throw ConfigError("eta_min must be >= 0");
    if (!(eta_max >= eta_min)) throw ConfigError("eta_max must be >= eta_min");
    if (t_max < 1) throw ConfigError("t_max must be >= 1");
  }
};

/// eta(t) = eta_min + (eta_max - eta_min) * (1 + cos(pi * t / t_max)) / 2.
inline double cosine_lr(const CosineSchedule& s, int t) {
  s.validate();
  if (t < 0 || t > s.t_max)
    throw UsageError("cosine_lr: epoch " + std::to_string(t) + " outside [0, " + std::to_string(s.t_max) + "]");
  return s.eta_min + 0.5 * (s.eta_max - s.eta_min) * (1.0 + std::cos(std::numbers::pi * t / s.t_max));
}

}  // namespace mixres
