#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "sduseg/errors.hpp"
#include "sduseg/layers.hpp"

namespace sduseg {

struct TrainConfig {
  double learning_rate = 5e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps_adam = 1e-8;
  int batch_size = 4;
  int epochs = 500;
  std::uint64_t seed = 0;
  int checkpoint_every = 0;  // 0: only best + final

  void validate() const {
    if (!(learning_rate > 0)) {
      throw std::invalid_argument("train config: learning rate must be > 0");
    }
    if (beta1 < 0 || beta1 >= 1 || beta2 < 0 || beta2 >= 1) {
      throw std::invalid_argument("train config: betas must be in [0, 1)");
    }
    if (eps_adam <= 0) throw std::invalid_argument("train config: eps must be > 0");
    if (batch_size < 1) throw std::invalid_argument("train config: batch size must be >= 1");
    if (epochs < 1) throw std::invalid_argument("train config: epochs must be >= 1");
    if (checkpoint_every < 0) {
      throw std::invalid_argument("train config: checkpoint interval must be >= 0");
    }
  }
};

// Bias-corrected Adam. Moments are keyed by qualified parameter name, so the
// trajectory of a parameter never depends on registration order, and the
// state serializes by name for resume.
template <typename T>
class AdamOptimizer {
 public:
  struct Moments {
    std::vector<T> m, v;
  };

  AdamOptimizer(double lr, double beta1, double beta2, double eps)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  explicit AdamOptimizer(const TrainConfig& cfg)
      : AdamOptimizer(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps_adam) {}

  void step(Layer<T>& model) {
    ++step_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(step_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(step_));
    model.visit_parameters([&](const std::string& name, Tensor<T>& t) {
      auto& g = t.grad();
      auto& mo = state_[name];
      if (mo.m.empty()) {
        mo.m.assign(g.size(), T(0));
        mo.v.assign(g.size(), T(0));
      } else if (mo.m.size() != g.size()) {
        throw std::invalid_argument("adam: state size mismatch for " + name);
      }
      T* p = t.data();
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double gi = static_cast<double>(g[i]);
        if (!std::isfinite(gi)) {
          throw NumericError("adam: non-finite gradient in " + name);
        }
        const double m = beta1_ * mo.m[i] + (1.0 - beta1_) * gi;
        const double v = beta2_ * mo.v[i] + (1.0 - beta2_) * gi * gi;
        mo.m[i] = static_cast<T>(m);
        mo.v[i] = static_cast<T>(v);
        p[i] -= static_cast<T>(lr_ * (m / c1) / (std::sqrt(v / c2) + eps_));
      }
    });
  }

  long long steps() const { return step_; }
  double learning_rate() const { return lr_; }

  // Serialization hooks: moments in name order plus the step counter.
  const std::map<std::string, Moments>& state() const { return state_; }
  void restore(std::map<std::string, Moments> state, long long steps) {
    state_ = std::move(state);
    step_ = steps;
  }

 private:
  double lr_, beta1_, beta2_, eps_;
  long long step_ = 0;
  std::map<std::string, Moments> state_;
};

}  // namespace sduseg
