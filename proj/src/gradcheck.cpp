#include "dsmil/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace dsmil {

namespace {

double evaluate(const LossBuilder& loss) {
  Graph g;
  return loss(g).item();
}

}  // namespace

GradCheckResult finite_diff_gradcheck(const LossBuilder& loss, std::span<Parameter* const> params, double eps) {
  zero_grads(params);
  {
    Graph g;
    g.backward(loss(g));
  }

  GradCheckResult result;
  for (std::size_t p = 0; p < params.size(); ++p) {
    auto values = params[p]->value.data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + eps;
      const double up = evaluate(loss);
      values[i] = saved - eps;
      const double down = evaluate(loss);
      values[i] = saved;

      const double numeric = (up - down) / (2.0 * eps);
      const double analytic = params[p]->grad[i];
      const double err = std::abs(analytic - numeric) / std::max(1e-8, std::abs(analytic) + std::abs(numeric));
      if (err > result.max_relative_error) {
        result = {err, p, i, analytic, numeric};
      }
    }
  }
  return result;
}

}  // namespace dsmil
