#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "vseg/autodiff.hpp"
#include "vseg/error.hpp"

namespace vseg {

enum class OptimizerKind { sgd, adam };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::adam;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// First-order optimiser over the trainable entries of a ParameterSet, reading
/// each parameter's accumulated `grad`.
template <typename T>
class Optimizer {
 public:
  explicit Optimizer(OptimizerConfig config = {}) : config_(config) {}

  const OptimizerConfig& config() const noexcept { return config_; }
  std::size_t steps() const noexcept { return step_; }

  void reset() {
    step_ = 0;
    first_.clear();
    second_.clear();
  }

  void step(ParameterSet<T>& params, double learning_rate) {
    if (!(learning_rate > 0)) throw ConfigError("optimizer: learning rate must be positive");
    for (const auto& p : params)
      if (p.grad.shape() != p.value.shape())
        throw ShapeError("optimizer: gradient of " + p.name + " has shape " + shape_string(p.grad.shape()) +
                         ", parameter has " + shape_string(p.value.shape()));
    if (config_.kind == OptimizerKind::adam) ensure_moments(params);
    ++step_;

    if (config_.kind == OptimizerKind::sgd) {
      for (auto& p : params) {
        if (!p.trainable) continue;
        for (std::size_t i = 0; i < p.value.size(); ++i)
          p.value[i] -= static_cast<T>(learning_rate * p.grad[i]);
      }
      return;
    }

    const double b1 = config_.beta1, b2 = config_.beta2;
    const double c1 = 1 - std::pow(b1, static_cast<double>(step_));
    const double c2 = 1 - std::pow(b2, static_cast<double>(step_));
    for (std::size_t k = 0; k < params.size(); ++k) {
      auto& p = params[k];
      if (!p.trainable) continue;
      auto& m = first_[k];
      auto& v = second_[k];
      for (std::size_t i = 0; i < p.value.size(); ++i) {
        const double g = p.grad[i];
        m[i] = b1 * m[i] + (1 - b1) * g;
        v[i] = b2 * v[i] + (1 - b2) * g * g;
        const double mhat = m[i] / c1;
        const double vhat = v[i] / c2;
        p.value[i] -= static_cast<T>(learning_rate * mhat / (std::sqrt(vhat) + config_.eps));
      }
    }
  }

 private:
  void ensure_moments(const ParameterSet<T>& params) {
    if (first_.empty()) {
      for (const auto& p : params) {
        first_.emplace_back(p.value.size(), 0.0);
        second_.emplace_back(p.value.size(), 0.0);
      }
      return;
    }
    if (first_.size() != params.size()) throw ShapeError("optimizer: parameter set changed size");
    for (std::size_t k = 0; k < params.size(); ++k)
      if (first_[k].size() != params[k].value.size())
        throw ShapeError("optimizer: state for " + params[k].name + " does not match its shape");
  }

  OptimizerConfig config_;
  std::size_t step_ = 0;
  std::vector<std::vector<double>> first_;
  std::vector<std::vector<double>> second_;
};

}  // namespace vseg
