#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "dsmil/autograd.hpp"
#include "dsmil/errors.hpp"
#include "dsmil/gradcheck.hpp"
#include "dsmil/optim.hpp"
#include "dsmil/tensor.hpp"
#include "test_util.hpp"

namespace dsmil {
namespace {

using testing::check_gradients;
using testing::probe;
using testing::random_tensor;

TEST(Tensor, ShapeAndDataAgree) {
  Tensor t({2, 3});
  EXPECT_EQ(t.size(), 6u);
  EXPECT_EQ(t.shape_string(), "[2x3]");
  EXPECT_THROW(Tensor({2, 2}, {1.0, 2.0, 3.0}), DimensionError);
  EXPECT_THROW(Tensor({0, 2}), DimensionError);
  EXPECT_THROW(Tensor(Shape{}), DimensionError);
  EXPECT_THROW(Tensor::vector({}), DomainError);
  EXPECT_EQ(Tensor::scalar(4.0).item(), 4.0);
  EXPECT_THROW(t.item(), DimensionError);
  EXPECT_THROW(t.reshaped({4}), DimensionError);
  EXPECT_EQ(t.reshaped({3, 2}).shape(), (Shape{3, 2}));
}

TEST(Linear, IdentityWeights) {
  Graph g;
  Var x = g.constant(Tensor::vector({1, 2, 3}));
  Var y = linear(x, g.constant(Tensor::identity(3)), g.constant(Tensor({3})));
  EXPECT_EQ(y.value().values(), (std::vector<double>{1, 2, 3}));
}

TEST(Linear, ZeroWeightsPassBias) {
  Graph g;
  Var x = g.constant(Tensor::vector({0.3, -4, 9}));
  Var y = linear(x, g.constant(Tensor({2, 3})), g.constant(Tensor::vector({5, 7})));
  EXPECT_EQ(y.value().values(), (std::vector<double>{5, 7}));
}

TEST(Linear, ShapeMismatchNamesBothShapes) {
  Graph g;
  try {
    linear(g.constant(Tensor({4})), g.constant(Tensor({2, 3})));
    FAIL();
  } catch (const DimensionError& e) {
    EXPECT_NE(std::string(e.what()).find("[2x3]"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("[4]"), std::string::npos);
  }
}

TEST(Linear, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(1);
  Parameter W("W", random_tensor({4, 5}, rng)), b("b", random_tensor({4}, rng)), x("x", random_tensor({5}, rng));
  auto build = [&](Graph& g) { return probe(linear(g.param(x), g.param(W), g.param(b))); };
  EXPECT_LT(check_gradients(build, {&W, &b, &x}).max_rel, 1e-6);
}

TEST(Matmul, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(2);
  Parameter A("A", random_tensor({3, 4}, rng)), B("B", random_tensor({4, 2}, rng));
  auto build = [&](Graph& g) { return probe(matmul(g.param(A), g.param(B))); };
  EXPECT_LT(check_gradients(build, {&A, &B}).max_rel, 1e-6);
}

TEST(Softmax, ClosedForms) {
  Graph g;
  auto eq = softmax(g.constant(Tensor::vector({2.5, 2.5, 2.5}))).value();
  for (double v : eq.data()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
  auto two = softmax(g.constant(Tensor::vector({0.0, std::log(2.0)}))).value();
  EXPECT_NEAR(two[0], 1.0 / 3.0, 1e-15);
  EXPECT_NEAR(two[1], 2.0 / 3.0, 1e-15);
}

TEST(Softmax, SumsToOneAndShiftInvariantProperty) {
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<std::size_t> len(1, 512);
  std::uniform_real_distribution<double> shift(-50.0, 50.0);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = trial == 0 ? 1 : (trial == 1 ? 512 : len(rng));
    Tensor x = random_tensor({n}, rng, -30.0, 30.0);
    Tensor shifted = x;
    const double c = shift(rng);
    for (double& v : shifted.data()) v += c;
    Graph g;
    const Tensor a = softmax(g.constant(x)).value();
    const Tensor b = softmax(g.constant(shifted)).value();
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      total += a[i];
      EXPECT_NEAR(a[i], b[i], 1e-12);
    }
    EXPECT_NEAR(total, 1.0, 1e-12);
    EXPECT_TRUE(a.all_finite());
  }
}

TEST(Softmax, LargeLogitsStayFinite) {
  Graph g;
  const Tensor a = softmax(g.constant(Tensor::vector({1000.0, 999.0, -1000.0}))).value();
  EXPECT_TRUE(a.all_finite());
  EXPECT_NEAR(a[0] + a[1] + a[2], 1.0, 1e-12);
}

TEST(Softmax, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(4);
  Parameter x("x", random_tensor({6}, rng, -2, 2));
  auto build = [&](Graph& g) { return probe(softmax(g.param(x))); };
  EXPECT_LT(check_gradients(build, {&x}).max_rel, 1e-6);
}

TEST(ReduceMax, ValueAndIndex) {
  Graph g;
  auto r = reduce_max_with_index(g.constant(Tensor::vector({-1, 2, 0.5})));
  EXPECT_EQ(r.value.item(), 2.0);
  EXPECT_EQ(r.index, 1u);
  auto tie = reduce_max_with_index(g.constant(Tensor::vector({3, 3, 1})));
  EXPECT_EQ(tie.value.item(), 3.0);
  EXPECT_EQ(tie.index, 0u);
}

TEST(ReduceMax, GradientIsOneHot) {
  Parameter x("x", Tensor::vector({0.1, 0.7, -0.3}));
  auto build = [&](Graph& g) { return reduce_max_with_index(g.param(x)).value; };
  EXPECT_LT(check_gradients(build, {&x}).max_rel, 1e-6);
  EXPECT_EQ(x.grad.values(), (std::vector<double>{0, 1, 0}));
}

TEST(ReduceMax, PermutationEquivariant) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    Tensor x = random_tensor({17}, rng);
    std::vector<std::size_t> perm(17);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    Tensor px({17});
    for (std::size_t i = 0; i < 17; ++i) px[i] = x[perm[i]];
    Graph g;
    auto a = reduce_max_with_index(g.constant(x));
    auto b = reduce_max_with_index(g.constant(px));
    EXPECT_EQ(a.value.item(), b.value.item());
    EXPECT_EQ(perm[b.index], a.index);
  }
}

TEST(WeightedSum, SelectionAndMean) {
  Tensor V = Tensor::matrix(2, 3, {1, 2, 3, 4, 5, 6});
  Graph g;
  auto sel = weighted_sum(g.constant(V), g.constant(Tensor::vector({0, 1, 0}))).value();
  EXPECT_EQ(sel.values(), (std::vector<double>{2, 5}));
  auto avg = weighted_sum(g.constant(V), g.constant(Tensor::vector({1.0 / 3, 1.0 / 3, 1.0 / 3}))).value();
  EXPECT_NEAR(avg[0], 2.0, 1e-15);
  EXPECT_NEAR(avg[1], 5.0, 1e-15);
  EXPECT_THROW(weighted_sum(g.constant(V), g.constant(Tensor::vector({1, 0}))), DimensionError);
}

TEST(WeightedSum, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(6);
  Parameter V("V", random_tensor({4, 5}, rng)), a("a", random_tensor({5}, rng));
  auto build = [&](Graph& g) { return probe(weighted_sum(g.param(V), g.param(a))); };
  EXPECT_LT(check_gradients(build, {&V, &a}).max_rel, 1e-6);
}

TEST(Activations, Definitions) {
  Graph g;
  EXPECT_EQ(relu(g.constant(Tensor::vector({-1, 0, 2}))).value().values(), (std::vector<double>{0, 0, 2}));
  EXPECT_EQ(sigmoid(g.constant(Tensor::scalar(0))).item(), 0.5);
  const Tensor s = sigmoid(g.constant(Tensor::vector({-800, 800}))).value();
  EXPECT_TRUE(s.all_finite());
  EXPECT_EQ(s[1], 1.0);
}

TEST(Activations, GradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(7);
  Parameter x("x", random_tensor({8}, rng, -3, 3));
  EXPECT_LT(check_gradients([&](Graph& g) { return probe(tanh(g.param(x))); }, {&x}).max_rel, 1e-6);
  EXPECT_LT(check_gradients([&](Graph& g) { return probe(sigmoid(g.param(x))); }, {&x}).max_rel, 1e-6);
  EXPECT_LT(check_gradients([&](Graph& g) { return probe(relu(g.param(x))); }, {&x}).max_rel, 1e-6);
}

TEST(Elementwise, GradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(8);
  Parameter a("a", random_tensor({5}, rng)), b("b", random_tensor({5}, rng));
  auto build = [&](Graph& g) {
    Var x = g.param(a), y = g.param(b);
    Var t = add(mul(x, y), sub(square(x), scale(y, 0.3)));
    return add(add(sum(add_scalar(t, 2.0)), mean(weighted_add(x, 0.25, y, 0.75))), dot(x, y));
  };
  EXPECT_LT(check_gradients(build, {&a, &b}).max_rel, 1e-6);
}

TEST(MatrixOps, GradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(9);
  Parameter X("X", random_tensor({4, 6}, rng));
  auto build = [&](Graph& g) {
    Var x = g.param(X);
    Var r = add(add(row_max(x), row_mean(x)), column(x, 2));
    Var d = column_dots(x, 3);
    std::vector<Var> cols{column(x, 0), column(x, 5)};
    return add(add(probe(r), probe(d, 7)), probe(reshape(stack_columns(cols), {8}), 11));
  };
  EXPECT_LT(check_gradients(build, {&X}).max_rel, 1e-6);
}

TEST(ColumnDots, CountsOneProductPerColumn) {
  std::mt19937_64 rng(10);
  Graph g;
  std::size_t counter = 0;
  Var d = column_dots(g.constant(random_tensor({3, 9}, rng)), 4, &counter);
  EXPECT_EQ(counter, 9u);
  EXPECT_EQ(d.size(), 9u);
}

TEST(Conv2d, IdentityKernel) {
  std::mt19937_64 rng(11);
  Tensor x = random_tensor({1, 5, 5}, rng);
  Graph g;
  Var y = conv2d(g.constant(x), g.constant(Tensor::filled({1, 1, 1, 1}, 1.0)), g.constant(Tensor({1})));
  EXPECT_EQ(y.value().values(), x.values());
  EXPECT_EQ(y.shape(), (Shape{1, 5, 5}));
}

TEST(Conv2d, BiasPassthroughAndShape) {
  std::mt19937_64 rng(12);
  Graph g;
  Var y = conv2d(g.constant(Tensor({2, 7, 7})), g.constant(random_tensor({3, 2, 3, 3}, rng)),
                 g.constant(Tensor::vector({0.5, -1, 2})), 2);
  EXPECT_EQ(y.shape(), (Shape{3, 3, 3}));
  for (std::size_t f = 0; f < 3; ++f)
    for (std::size_t i = 0; i < 9; ++i) EXPECT_EQ(y.value()[f * 9 + i], (std::vector<double>{0.5, -1, 2})[f]);
}

TEST(Conv2d, KernelLargerThanInput) {
  Graph g;
  EXPECT_THROW(conv2d(g.constant(Tensor({1, 3, 3})), g.constant(Tensor({1, 1, 4, 4})), std::nullopt), DimensionError);
}

TEST(Conv2d, MatchesDirectLoop) {
  std::mt19937_64 rng(13);
  Tensor x = random_tensor({2, 6, 6}, rng), K = random_tensor({3, 2, 3, 3}, rng), b = random_tensor({3}, rng);
  Graph g;
  const Tensor y = conv2d(g.constant(x), g.constant(K), g.constant(b)).value();
  for (std::size_t f = 0; f < 3; ++f)
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t j = 0; j < 4; ++j) {
        double acc = b[f];
        for (std::size_t c = 0; c < 2; ++c)
          for (std::size_t u = 0; u < 3; ++u)
            for (std::size_t v = 0; v < 3; ++v) acc += K[((f * 2 + c) * 3 + u) * 3 + v] * x[(c * 6 + i + u) * 6 + j + v];
        EXPECT_NEAR(y[(f * 4 + i) * 4 + j], acc, 1e-13);
      }
}

TEST(Conv2d, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(14);
  Parameter x("x", random_tensor({1, 4, 4}, rng)), K("K", random_tensor({2, 1, 2, 2}, rng)),
      b("b", random_tensor({2}, rng));
  auto build = [&](Graph& g) { return probe(conv2d(g.param(x), g.param(K), g.param(b))); };
  EXPECT_LT(check_gradients(build, {&K, &x, &b}).max_rel, 1e-5);
}

TEST(MaxPool2d, ConstantAndDirectMax) {
  Graph g;
  const Tensor c = maxpool2d(g.constant(Tensor::filled({2, 4, 4}, 1.5)), 2, 2).value();
  EXPECT_EQ(c.shape(), (Shape{2, 2, 2}));
  for (double v : c.data()) EXPECT_EQ(v, 1.5);
  const Tensor m = maxpool2d(g.constant(Tensor({1, 2, 2}, {1, 2, 3, 4})), 2, 2).value();
  EXPECT_EQ(m.values(), (std::vector<double>{4}));
  EXPECT_THROW(maxpool2d(g.constant(Tensor({1, 2, 2})), 3, 3), DimensionError);
}

TEST(MaxPool2d, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(15);
  Tensor vals({2, 4, 4});
  std::vector<double> distinct(32);
  std::iota(distinct.begin(), distinct.end(), 0.0);
  std::shuffle(distinct.begin(), distinct.end(), rng);
  for (std::size_t i = 0; i < 32; ++i) vals[i] = distinct[i] * 0.1;
  Parameter x("x", vals);
  auto build = [&](Graph& g) { return probe(maxpool2d(g.param(x), 2, 2)); };
  EXPECT_LT(check_gradients(build, {&x}).max_rel, 1e-5);
}

TEST(Backward, ConstantLossGivesZeroGradients) {
  Parameter w("w", Tensor::vector({1, 2, 3}));
  w.grad.fill(0.0);
  Graph g;
  g.param(w);
  g.backward(g.constant(Tensor::scalar(4.0)));
  for (double v : w.grad.data()) EXPECT_EQ(v, 0.0);
}

TEST(Backward, SumOfSquares) {
  Parameter w("w", Tensor::vector({1, -2, 0.5}));
  w.zero_grad();
  Graph g;
  g.backward(sum(square(g.param(w))));
  EXPECT_EQ(w.grad.values(), (std::vector<double>{2, -4, 1}));
}

TEST(Backward, RejectsNonScalarAndSecondPass) {
  Parameter w("w", Tensor::vector({1, 2}));
  Graph g;
  Var v = g.param(w);
  EXPECT_THROW(g.backward(v), UsageError);
  Var loss = sum(v);
  g.backward(loss);
  EXPECT_TRUE(g.consumed());
  EXPECT_THROW(g.backward(loss), UsageError);
}

TEST(Backward, GradientsAccumulateLinearly) {
  std::mt19937_64 rng(16);
  Parameter w("w", random_tensor({5}, rng));
  auto loss1 = [&](Graph& g) { return sum(tanh(g.param(w))); };
  auto loss2 = [&](Graph& g) { return dot(g.param(w), g.constant(Tensor::vector({1, 2, 3, 4, 5}))); };
  w.zero_grad();
  {
    Graph g;
    g.backward(add(loss1(g), loss2(g)));
  }
  const Tensor joint = w.grad;
  w.zero_grad();
  {
    Graph g;
    g.backward(loss1(g));
  }
  {
    Graph g;
    g.backward(loss2(g));
  }
  EXPECT_EQ(joint, w.grad);
}

TEST(Backward, FrozenLeafReceivesNoGradient) {
  Parameter a("a", Tensor::vector({1, 2})), b("b", Tensor::vector({3, 4}));
  a.zero_grad();
  b.zero_grad();
  Graph g;
  g.backward(dot(g.param(a), g.param(b, false)));
  EXPECT_EQ(a.grad.values(), (std::vector<double>{3, 4}));
  EXPECT_EQ(b.grad.values(), (std::vector<double>{0, 0}));
}

TEST(GradCheck, ExactForQuadraticAndLinear) {
  std::mt19937_64 rng(17);
  Parameter w("w", random_tensor({6}, rng));
  std::vector<Parameter*> ps{&w};
  auto quad = finite_diff_gradcheck([&](Graph& g) { return sum(square(g.param(w))); }, ps);
  EXPECT_LT(quad.max_relative_error, 1e-9);
  auto lin = finite_diff_gradcheck(
      [&](Graph& g) { return dot(g.param(w), g.constant(Tensor::vector({1, -2, 3, 0.5, 7, 1}))); }, ps);
  EXPECT_LT(lin.max_relative_error, 1e-10);
}

TEST(GradCheck, DetectsWrongGradient) {
  Parameter w("w", Tensor::vector({0.3, 0.8}));
  std::vector<Parameter*> ps{&w};
  // Forward is x^2 but the recorded backward claims 3x.
  auto bogus = [&](Graph& g) {
    Var x = g.param(w);
    Tensor v = x.value();
    for (double& e : v.data()) e *= e;
    Var y = g.record(v, {x.id()}, [](Graph& gr, std::size_t self) {
      const std::size_t in = self - 1;
      Tensor& gi = gr.grad_buffer(in);
      for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += gr.grad(self)[i] * 3.0 * gr.value(in)[i];
    });
    return sum(y);
  };
  EXPECT_GT(finite_diff_gradcheck(bogus, ps).max_relative_error, 0.1);
  EXPECT_EQ(w.value.values(), (std::vector<double>{0.3, 0.8}));
}

TEST(Adam, ZeroGradientIsIdentity) {
  std::mt19937_64 rng(18);
  Parameter w("w", random_tensor({3, 3}, rng));
  const Tensor before = w.value;
  w.zero_grad();
  Adam adam;
  std::vector<Parameter*> ps{&w};
  for (int i = 0; i < 5; ++i) adam.step(ps);
  EXPECT_EQ(w.value, before);
}

TEST(Adam, FirstStepClosedForm) {
  Parameter w("w", Tensor::vector({1.0, -2.0, 0.5}));
  w.grad = Tensor::vector({0.3, -7.0, 1e-3});
  const Tensor before = w.value;
  AdamState state;
  std::vector<Parameter*> ps{&w};
  adam_step(state, ps);
  const double lr = 1e-4, eps = 1e-8;
  for (std::size_t i = 0; i < 3; ++i) {
    const double g = w.grad[i];
    EXPECT_NEAR(w.value[i] - before[i], -lr * g / (std::abs(g) + eps), 1e-15);
  }
  EXPECT_EQ(state.moments.at(&w).steps, 1u);
  EXPECT_EQ(state.updates, 1u);
}

TEST(Adam, ScalarQuadraticMatchesRecurrence) {
  Parameter w("w", Tensor::scalar(0.0));
  AdamConfig cfg;
  cfg.lr = 0.1;
  Adam adam(cfg);
  std::vector<Parameter*> ps{&w};
  // Reference recurrence.
  double x = 0.0, m = 0.0, v = 0.0;
  for (int t = 1; t <= 200; ++t) {
    w.grad = Tensor::scalar(2.0 * (w.value.item() - 3.0));
    adam.step(ps);
    const double g = 2.0 * (x - 3.0);
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g * g;
    const double mh = m / (1.0 - std::pow(0.9, t)), vh = v / (1.0 - std::pow(0.999, t));
    x -= 0.1 * mh / (std::sqrt(vh) + 1e-8);
  }
  EXPECT_NEAR(w.value.item(), x, 1e-12);
  EXPECT_LT(std::abs(w.value.item() - 3.0), 0.1);
}

TEST(Sgd, ClosedFormAndLoop) {
  Parameter w("w", Tensor::scalar(1.0));
  w.grad = Tensor::scalar(2.0);
  Sgd sgd(0.5);
  std::vector<Parameter*> ps{&w};
  sgd.step(ps);
  EXPECT_EQ(w.value.item(), 0.0);

  std::mt19937_64 rng(19);
  Parameter p("p", random_tensor({4, 3}, rng));
  p.grad = random_tensor({4, 3}, rng);
  Tensor expected = p.value;
  for (std::size_t i = 0; i < expected.size(); ++i) expected[i] = expected[i] - 0.01 * p.grad[i];
  std::vector<Parameter*> pp{&p};
  sgd_step(pp, 0.01);
  EXPECT_EQ(p.value, expected);

  p.zero_grad();
  const Tensor before = p.value;
  sgd_step(pp, 0.01);
  EXPECT_EQ(p.value, before);
}

TEST(Parameter, ZeroGradMatchesShape) {
  Parameter p("p", Tensor({2, 5}));
  p.grad = Tensor::filled({2, 5}, 3.0);
  p.zero_grad();
  EXPECT_EQ(p.grad.shape(), p.value.shape());
  for (double v : p.grad.data()) EXPECT_EQ(v, 0.0);
}

}  // namespace
}  // namespace dsmil
