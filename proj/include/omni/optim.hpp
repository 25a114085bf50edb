#pragma once

#include <cmath>
#include <functional>
#include <map>
#include <string>

#include "omni/params.hpp"
#include "omni/schedule.hpp"

namespace omni {

/// AdamW with decoupled weight decay. Each tensor keeps its own step count,
/// so a tensor skipped by step() keeps its value and its moment estimates.
class AdamW {
 public:
  explicit AdamW(OptimConfig cfg) : cfg_(cfg) { cfg_.validate(); }

  /// lr_for(name) gives the learning rate of a tensor; skip(name) == true
  /// leaves it entirely untouched.
  void step(ParamSet& params, const GradMap& grads, const std::function<double(const std::string&)>& lr_for,
            const std::function<bool(const std::string&)>& skip) {
    for (auto& [name, value] : params) {
      if (skip(name)) continue;
      auto g = grads.find(name);
      if (g == grads.end()) continue;
      require_same_shape(value, g->second, "adamw");
      State& s = state_[name];
      if (s.m.empty()) {
        s.m = Matrix(value.rows(), value.cols());
        s.v = Matrix(value.rows(), value.cols());
      }
      ++s.t;
      const double lr = lr_for(name);
      const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(s.t));
      const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(s.t));
      auto p = value.flat();
      auto gr = g->second.flat();
      auto m = s.m.flat();
      auto v = s.v.flat();
      for (std::size_t i = 0; i < p.size(); ++i) {
        m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * gr[i];
        v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * gr[i] * gr[i];
        const double mhat = m[i] / c1;
        const double vhat = v[i] / c2;
        p[i] -= lr * (mhat / (std::sqrt(vhat) + cfg_.eps) + cfg_.weight_decay * p[i]);
      }
    }
  }

  const OptimConfig& config() const { return cfg_; }

 private:
  struct State {
    Matrix m;
    Matrix v;
    std::size_t t = 0;
  };
  OptimConfig cfg_;
  std::map<std::string, State> state_;
};

}  // namespace omni
