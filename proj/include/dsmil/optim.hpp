#pragma once

#include <cstdint>
#include <span>
#include <unordered_map>

#include "dsmil/autograd.hpp"

namespace dsmil {

class Optimizer {
 public:
  virtual ~Optimizer() = default;
  /// Applies one update to `params` from their accumulated gradients.
  virtual void step(std::span<Parameter* const> params) = 0;
};

/// value <- value - lr * grad
void sgd_step(std::span<Parameter* const> params, double lr);

class Sgd final : public Optimizer {
 public:
  explicit Sgd(double lr) : lr_(lr) {}
  void step(std::span<Parameter* const> params) override { sgd_step(params, lr_); }
  double learning_rate() const { return lr_; }

 private:
  double lr_;
};

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Moment estimates for one parameter. `steps` counts the updates applied to
/// this parameter and drives its bias correction.
struct AdamMoments {
  Tensor first;
  Tensor second;
  std::uint64_t steps = 0;
};

struct AdamState {
  AdamConfig config;
  std::unordered_map<const Parameter*, AdamMoments> moments;
  std::uint64_t updates = 0;  // calls to adam_step
};

/// Bias-corrected Adam update of `params`. Moments are created lazily the
/// first time a parameter is seen.
void adam_step(AdamState& state, std::span<Parameter* const> params);

class Adam final : public Optimizer {
 public:
  explicit Adam(AdamConfig config = {}) { state_.config = config; }
  void step(std::span<Parameter* const> params) override { adam_step(state_, params); }
  const AdamState& state() const { return state_; }

 private:
  AdamState state_;
};

}  // namespace dsmil
