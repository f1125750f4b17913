#include "dsmil/optim.hpp"

#include <cmath>

#include "dsmil/errors.hpp"

namespace dsmil {

void sgd_step(std::span<Parameter* const> params, double lr) {
  for (Parameter* p : params) {
    auto v = p->value.data();
    auto g = p->grad.data();
    for (std::size_t i = 0; i < v.size(); ++i) v[i] -= lr * g[i];
  }
}

void adam_step(AdamState& state, std::span<Parameter* const> params) {
  const AdamConfig& cfg = state.config;
  for (Parameter* p : params) {
    if (p->grad.shape() != p->value.shape()) {
      throw DimensionError("adam_step: gradient of '" + p->name + "' has shape " + p->grad.shape_string() +
                           ", value has " + p->value.shape_string());
    }
    auto [it, inserted] = state.moments.try_emplace(p);
    AdamMoments& mom = it->second;
    if (inserted) {
      mom.first = Tensor(p->value.shape());
      mom.second = Tensor(p->value.shape());
    }
    ++mom.steps;
    const double t = static_cast<double>(mom.steps);
    const double c1 = 1.0 - std::pow(cfg.beta1, t);
    const double c2 = 1.0 - std::pow(cfg.beta2, t);
    auto v = p->value.data();
    auto g = p->grad.data();
    auto m1 = mom.first.data();
    auto m2 = mom.second.data();
    for (std::size_t i = 0; i < v.size(); ++i) {
      m1[i] = cfg.beta1 * m1[i] + (1.0 - cfg.beta1) * g[i];
      m2[i] = cfg.beta2 * m2[i] + (1.0 - cfg.beta2) * g[i] * g[i];
      v[i] -= cfg.lr * (m1[i] / c1) / (std::sqrt(m2[i] / c2) + cfg.eps);
    }
  }
  ++state.updates;
}

}  // namespace dsmil
