#pragma once

#include <functional>
#include <span>

#include "dsmil/autograd.hpp"

namespace dsmil {

/// Builds a scalar loss on the supplied graph from the current parameter
/// values. Must be deterministic.
using LossBuilder = std::function<Var(Graph&)>;

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t worst_parameter = 0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

/// Compares reverse-mode gradients against central differences over every
/// coordinate of every parameter. The per-coordinate error is
/// |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
/// Parameter values are restored afterwards; their gradients hold the
/// analytic gradient.
GradCheckResult finite_diff_gradcheck(const LossBuilder& loss, std::span<Parameter* const> params,
                                      double eps = 1e-5);

}  // namespace dsmil
