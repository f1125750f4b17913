#include "dsmil/autograd.hpp"

#include <algorithm>
#include <cmath>

#include "dsmil/errors.hpp"

namespace dsmil {

Parameter::Parameter(std::string name_, Tensor value_)
    : name(std::move(name_)), value(std::move(value_)), grad(value.shape()) {}

void Parameter::zero_grad() {
  if (grad.shape() != value.shape()) {
    grad = Tensor(value.shape());
  } else {
    grad.fill(0.0);
  }
}

void zero_grads(std::span<Parameter* const> params) {
  for (auto* p : params) p->zero_grad();
}

const Tensor& Var::value() const {
  if (graph_ == nullptr) throw UsageError("use of an unbound Var");
  return graph_->value(id_);
}

Var Graph::constant(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, {}, {}, nullptr, false});
  return Var(this, nodes_.size() - 1);
}

Var Graph::param(Parameter& p, bool trainable) {
  nodes_.push_back(Node{p.value, {}, {}, {}, trainable ? &p : nullptr, trainable});
  return Var(this, nodes_.size() - 1);
}

Var Graph::record(Tensor value, std::vector<std::size_t> inputs, BackwardFn backward) {
  if (consumed_) throw UsageError("cannot record on a graph that has already run backward");
  const bool needs = std::any_of(inputs.begin(), inputs.end(), [&](std::size_t i) { return nodes_[i].requires_grad; });
  nodes_.push_back(Node{std::move(value), {}, std::move(inputs), needs ? std::move(backward) : BackwardFn{}, nullptr, needs});
  return Var(this, nodes_.size() - 1);
}

Tensor& Graph::grad_buffer(std::size_t id) {
  Node& n = nodes_[id];
  if (n.grad.empty()) n.grad = Tensor(n.value.shape());
  return n.grad;
}

void Graph::backward(const Var& loss) {
  if (&loss.graph() != this) throw UsageError("loss belongs to a different graph");
  if (consumed_) throw UsageError("graph already consumed by a previous backward pass");
  if (loss.size() != 1) throw UsageError("backward needs a scalar loss, got shape " + loss.value().shape_string());
  consumed_ = true;
  if (!nodes_[loss.id()].requires_grad) return;

  grad_buffer(loss.id())[0] = 1.0;
  for (std::size_t k = loss.id() + 1; k-- > 0;) {
    Node& n = nodes_[k];
    if (!n.requires_grad || n.grad.empty()) continue;
    if (n.param != nullptr) {
      auto dst = n.param->grad.data();
      auto src = n.grad.data();
      for (std::size_t i = 0; i < src.size(); ++i) dst[i] += src[i];
    } else if (n.backward) {
      n.backward(*this, k);
    }
  }
}

namespace {

Graph& graph_of(const Var& a) {
  if (!a.valid()) throw UsageError("operation on an unbound Var");
  return a.graph();
}

Graph& graph_of(const Var& a, const Var& b) {
  Graph& g = graph_of(a);
  if (&graph_of(b) != &g) throw UsageError("operands belong to different graphs");
  return g;
}

void require_same_shape(const char* op, const Var& a, const Var& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + a.value().shape_string() + " vs " +
                         b.value().shape_string());
  }
}

// Adds `scale * src` into the gradient buffer of node `id` when it needs one.
void accumulate(Graph& g, std::size_t id, std::span<const double> src, double factor = 1.0) {
  if (!g.requires_grad(id)) return;
  auto dst = g.grad_buffer(id).data();
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] += factor * src[i];
}

template <class F, class D>
Var unary(const Var& x, F f, D dfdx_from_xy) {
  Graph& g = graph_of(x);
  const Tensor& xv = x.value();
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
  const std::size_t xi = x.id();
  return g.record(std::move(out), {xi}, [xi, dfdx_from_xy](Graph& gr, std::size_t self) {
    const Tensor& xv = gr.value(xi);
    const Tensor& yv = gr.value(self);
    const Tensor& gy = gr.grad(self);
    Tensor& gx = gr.grad_buffer(xi);
    for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i] * dfdx_from_xy(xv[i], yv[i]);
  });
}

}  // namespace

Var linear(const Var& x, const Var& W, const std::optional<Var>& b) {
  Graph& g = graph_of(x, W);
  const Tensor& xv = x.value();
  const Tensor& wv = W.value();
  if (wv.rank() != 2 || xv.rank() != 1 || wv.dim(1) != xv.dim(0)) {
    throw DimensionError("linear: weight " + wv.shape_string() + " incompatible with input " + xv.shape_string());
  }
  const std::size_t M = wv.dim(0), L = wv.dim(1);
  if (b && (b->value().rank() != 1 || b->value().dim(0) != M)) {
    throw DimensionError("linear: bias " + b->value().shape_string() + " incompatible with weight " +
                         wv.shape_string());
  }
  Tensor out({M});
  for (std::size_t m = 0; m < M; ++m) {
    double acc = 0.0;
    const double* row = wv.data().data() + m * L;
    for (std::size_t l = 0; l < L; ++l) acc += row[l] * xv[l];
    out[m] = acc;
  }
  std::vector<std::size_t> inputs{x.id(), W.id()};
  if (b) {
    graph_of(x, *b);
    const Tensor& bv = b->value();
    for (std::size_t m = 0; m < M; ++m) out[m] += bv[m];
    inputs.push_back(b->id());
  }
  const std::size_t xi = x.id(), wi = W.id();
  const std::optional<std::size_t> bi = b ? std::optional<std::size_t>(b->id()) : std::nullopt;
  return g.record(std::move(out), std::move(inputs), [xi, wi, bi, M, L](Graph& gr, std::size_t self) {
    const Tensor& gy = gr.grad(self);
    const Tensor& xv = gr.value(xi);
    const Tensor& wv = gr.value(wi);
    if (gr.requires_grad(wi)) {
      Tensor& gw = gr.grad_buffer(wi);
      for (std::size_t m = 0; m < M; ++m) {
        double* row = gw.data().data() + m * L;
        for (std::size_t l = 0; l < L; ++l) row[l] += gy[m] * xv[l];
      }
    }
    if (gr.requires_grad(xi)) {
      Tensor& gx = gr.grad_buffer(xi);
      for (std::size_t m = 0; m < M; ++m) {
        const double* row = wv.data().data() + m * L;
        for (std::size_t l = 0; l < L; ++l) gx[l] += gy[m] * row[l];
      }
    }
    if (bi) accumulate(gr, *bi, gy.data());
  });
}

Var matmul(const Var& A, const Var& B) {
  Graph& g = graph_of(A, B);
  const Tensor& av = A.value();
  const Tensor& bv = B.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(0)) {
    throw DimensionError("matmul: " + av.shape_string() + " incompatible with " + bv.shape_string());
  }
  const std::size_t M = av.dim(0), K = av.dim(1), N = bv.dim(1);
  Tensor out({M, N});
  for (std::size_t m = 0; m < M; ++m) {
    for (std::size_t k = 0; k < K; ++k) {
      const double a = av(m, k);
      const double* brow = bv.data().data() + k * N;
      double* orow = out.data().data() + m * N;
      for (std::size_t n = 0; n < N; ++n) orow[n] += a * brow[n];
    }
  }
  const std::size_t ai = A.id(), bi = B.id();
  return g.record(std::move(out), {ai, bi}, [ai, bi, M, K, N](Graph& gr, std::size_t self) {
    const Tensor& gy = gr.grad(self);
    const Tensor& av = gr.value(ai);
    const Tensor& bv = gr.value(bi);
    if (gr.requires_grad(ai)) {
      Tensor& ga = gr.grad_buffer(ai);
      for (std::size_t m = 0; m < M; ++m) {
        for (std::size_t k = 0; k < K; ++k) {
          double acc = 0.0;
          for (std::size_t n = 0; n < N; ++n) acc += gy(m, n) * bv(k, n);
          ga(m, k) += acc;
        }
      }
    }
    if (gr.requires_grad(bi)) {
      Tensor& gb = gr.grad_buffer(bi);
      for (std::size_t m = 0; m < M; ++m) {
        for (std::size_t k = 0; k < K; ++k) {
          const double a = av(m, k);
          for (std::size_t n = 0; n < N; ++n) gb(k, n) += a * gy(m, n);
        }
      }
    }
  });
}

Var add(const Var& a, const Var& b) { return weighted_add(a, 1.0, b, 1.0); }

Var sub(const Var& a, const Var& b) { return weighted_add(a, 1.0, b, -1.0); }

Var weighted_add(const Var& a, double wa, const Var& b, double wb) {
  Graph& g = graph_of(a, b);
  require_same_shape("weighted_add", a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  Tensor out(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = wa * av[i] + wb * bv[i];
  const std::size_t ai = a.id(), bi = b.id();
  return g.record(std::move(out), {ai, bi}, [ai, bi, wa, wb](Graph& gr, std::size_t self) {
    accumulate(gr, ai, gr.grad(self).data(), wa);
    accumulate(gr, bi, gr.grad(self).data(), wb);
  });
}

Var mul(const Var& a, const Var& b) {
  Graph& g = graph_of(a, b);
  require_same_shape("mul", a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  Tensor out(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] * bv[i];
  const std::size_t ai = a.id(), bi = b.id();
  return g.record(std::move(out), {ai, bi}, [ai, bi](Graph& gr, std::size_t self) {
    const Tensor& gy = gr.grad(self);
    if (gr.requires_grad(ai)) {
      const Tensor& bv = gr.value(bi);
      Tensor& ga = gr.grad_buffer(ai);
      for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i] * bv[i];
    }
    if (gr.requires_grad(bi)) {
      const Tensor& av = gr.value(ai);
      Tensor& gb = gr.grad_buffer(bi);
      for (std::size_t i = 0; i < gy.size(); ++i) gb[i] += gy[i] * av[i];
    }
  });
}

Var scale(const Var& a, double factor) {
  return unary(a, [factor](double x) { return factor * x; }, [factor](double, double) { return factor; });
}

Var add_scalar(const Var& a, double offset) {
  return unary(a, [offset](double x) { return x + offset; }, [](double, double) { return 1.0; });
}

Var square(const Var& a) {
  return unary(a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Var sum(const Var& a) {
  Graph& g = graph_of(a);
  double acc = 0.0;
  for (double v : a.value().data()) acc += v;
  const std::size_t ai = a.id();
  return g.record(Tensor::scalar(acc), {ai}, [ai](Graph& gr, std::size_t self) {
    const double gy = gr.grad(self)[0];
    Tensor& ga = gr.grad_buffer(ai);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += gy;
  });
}

Var mean(const Var& a) { return scale(sum(a), 1.0 / static_cast<double>(a.size())); }

Var dot(const Var& a, const Var& b) {
  Graph& g = graph_of(a, b);
  require_same_shape("dot", a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  double acc = 0.0;
  for (std::size_t i = 0; i < av.size(); ++i) acc += av[i] * bv[i];
  const std::size_t ai = a.id(), bi = b.id();
  return g.record(Tensor::scalar(acc), {ai, bi}, [ai, bi](Graph& gr, std::size_t self) {
    const double gy = gr.grad(self)[0];
    accumulate(gr, ai, gr.value(bi).data(), gy);
    accumulate(gr, bi, gr.value(ai).data(), gy);
  });
}

Var relu(const Var& x) {
  return unary(x, [](double v) { return v > 0.0 ? v : 0.0; }, [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Var tanh(const Var& x) {
  return unary(x, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

Var sigmoid(const Var& x) {
  return unary(
      x,
      [](double v) {
        if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
        const double e = std::exp(v);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Var softmax(const Var& x) {
  Graph& g = graph_of(x);
  const Tensor& xv = x.value();
  if (xv.rank() != 1) throw DimensionError("softmax: expected a vector, got " + xv.shape_string());
  const double mx = *std::max_element(xv.data().begin(), xv.data().end());
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = std::exp(xv[i] - mx);
  // Sorted summation keeps the normaliser independent of input order.
  std::vector<double> terms(out.data().begin(), out.data().end());
  std::sort(terms.begin(), terms.end());
  double total = 0.0;
  for (double t : terms) total += t;
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] /= total;
  const std::size_t xi = x.id();
  return g.record(std::move(out), {xi}, [xi](Graph& gr, std::size_t self) {
    const Tensor& y = gr.value(self);
    const Tensor& gy = gr.grad(self);
    double inner = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) inner += gy[i] * y[i];
    Tensor& gx = gr.grad_buffer(xi);
    for (std::size_t i = 0; i < y.size(); ++i) gx[i] += y[i] * (gy[i] - inner);
  });
}

MaxResult reduce_max_with_index(const Var& x) {
  Graph& g = graph_of(x);
  const Tensor& xv = x.value();
  if (xv.rank() != 1) throw DimensionError("reduce_max_with_index: expected a vector, got " + xv.shape_string());
  std::size_t best = 0;
  for (std::size_t i = 1; i < xv.size(); ++i) {
    if (xv[i] > xv[best]) best = i;
  }
  const std::size_t xi = x.id();
  Var v = g.record(Tensor::scalar(xv[best]), {xi}, [xi, best](Graph& gr, std::size_t self) {
    gr.grad_buffer(xi)[best] += gr.grad(self)[0];
  });
  return {v, best};
}

Var weighted_sum(const Var& V, const Var& a) {
  Graph& g = graph_of(V, a);
  const Tensor& vv = V.value();
  const Tensor& av = a.value();
  if (vv.rank() != 2 || av.rank() != 1 || vv.dim(1) != av.dim(0)) {
    throw DimensionError("weighted_sum: values " + vv.shape_string() + " incompatible with weights " +
                         av.shape_string());
  }
  const std::size_t L = vv.dim(0), N = vv.dim(1);
  Tensor out({L});
  for (std::size_t l = 0; l < L; ++l) {
    double acc = 0.0;
    for (std::size_t i = 0; i < N; ++i) acc += av[i] * vv(l, i);
    out[l] = acc;
  }
  const std::size_t vi = V.id(), ai = a.id();
  return g.record(std::move(out), {vi, ai}, [vi, ai, L, N](Graph& gr, std::size_t self) {
    const Tensor& gy = gr.grad(self);
    if (gr.requires_grad(vi)) {
      const Tensor& av = gr.value(ai);
      Tensor& gv = gr.grad_buffer(vi);
      for (std::size_t l = 0; l < L; ++l)
        for (std::size_t i = 0; i < N; ++i) gv(l, i) += gy[l] * av[i];
    }
    if (gr.requires_grad(ai)) {
      const Tensor& vv = gr.value(vi);
      Tensor& ga = gr.grad_buffer(ai);
      for (std::size_t i = 0; i < N; ++i) {
        double acc = 0.0;
        for (std::size_t l = 0; l < L; ++l) acc += gy[l] * vv(l, i);
        ga[i] += acc;
      }
    }
  });
}

Var stack_columns(std::span<const Var> columns) {
  if (columns.empty()) throw DomainError("stack_columns: no columns");
  Graph& g = graph_of(columns[0]);
  const std::size_t L = columns[0].size();
  const std::size_t N = columns.size();
  Tensor out({L, N});
  std::vector<std::size_t> ids;
  ids.reserve(N);
  for (std::size_t i = 0; i < N; ++i) {
    graph_of(columns[0], columns[i]);
    const Tensor& c = columns[i].value();
    if (c.rank() != 1 || c.dim(0) != L) {
      throw DimensionError("stack_columns: column " + std::to_string(i) + " has shape " + c.shape_string() +
                           ", expected [" + std::to_string(L) + "]");
    }
    for (std::size_t l = 0; l < L; ++l) out(l, i) = c[l];
    ids.push_back(columns[i].id());
  }
  auto inputs = ids;
  return g.record(std::move(out), std::move(inputs), [ids = std::move(ids), L](Graph& gr, std::size_t self) {
    const Tensor& gy = gr.grad(self);
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (!gr.requires_grad(ids[i])) continue;
      Tensor& gc = gr.grad_buffer(ids[i]);
      for (std::size_t l = 0; l < L; ++l) gc[l] += gy(l, i);
    }
  });
}

Var column(const Var& X, std::size_t i) {
  Graph& g = graph_of(X);
  const Tensor& xv = X.value();
  if (xv.rank() != 2) throw DimensionError("column: expected a matrix, got " + xv.shape_string());
  if (i >= xv.dim(1)) throw UsageError("column: index " + std::to_string(i) + " out of range for " + xv.shape_string());
  const std::size_t L = xv.dim(0);
  Tensor out({L});
  for (std::size_t l = 0; l < L; ++l) out[l] = xv(l, i);
  const std::size_t xi = X.id();
  return g.record(std::move(out), {xi}, [xi, i, L](Graph& gr, std::size_t self) {
    const Tensor& gy = gr.grad(self);
    Tensor& gx = gr.grad_buffer(xi);
    for (std::size_t l = 0; l < L; ++l) gx(l, i) += gy[l];
  });
}

Var row_max(const Var& X) {
  Graph& g = graph_of(X);
  const Tensor& xv = X.value();
  if (xv.rank() != 2) throw DimensionError("row_max: expected a matrix, got " + xv.shape_string());
  const std::size_t L = xv.dim(0), N = xv.dim(1);
  Tensor out({L});
  std::vector<std::size_t> arg(L, 0);
  for (std::size_t l = 0; l < L; ++l) {
    for (std::size_t i = 1; i < N; ++i) {
      if (xv(l, i) > xv(l, arg[l])) arg[l] = i;
    }
    out[l] = xv(l, arg[l]);
  }
  const std::size_t xi = X.id();
  return g.record(std::move(out), {xi}, [xi, arg = std::move(arg)](Graph& gr, std::size_t self) {
    const Tensor& gy = gr.grad(self);
    Tensor& gx = gr.grad_buffer(xi);
    for (std::size_t l = 0; l < arg.size(); ++l) gx(l, arg[l]) += gy[l];
  });
}

Var row_mean(const Var& X) {
  Graph& g = graph_of(X);
  const Tensor& xv = X.value();
  if (xv.rank() != 2) throw DimensionError("row_mean: expected a matrix, got " + xv.shape_string());
  const std::size_t L = xv.dim(0), N = xv.dim(1);
  const double inv = 1.0 / static_cast<double>(N);
  Tensor out({L});
  for (std::size_t l = 0; l < L; ++l) {
    double acc = 0.0;
    for (std::size_t i = 0; i < N; ++i) acc += xv(l, i);
    out[l] = acc * inv;
  }
  const std::size_t xi = X.id();
  return g.record(std::move(out), {xi}, [xi, L, N, inv](Graph& gr, std::size_t self) {
    const Tensor& gy = gr.grad(self);
    Tensor& gx = gr.grad_buffer(xi);
    for (std::size_t l = 0; l < L; ++l)
      for (std::size_t i = 0; i < N; ++i) gx(l, i) += gy[l] * inv;
  });
}

Var column_dots(const Var& X, std::size_t anchor, std::size_t* counter) {
  Graph& g = graph_of(X);
  const Tensor& xv = X.value();
  if (xv.rank() != 2) throw DimensionError("column_dots: expected a matrix, got " + xv.shape_string());
  const std::size_t L = xv.dim(0), N = xv.dim(1);
  if (anchor >= N) {
    throw UsageError("column_dots: anchor " + std::to_string(anchor) + " out of range for " + std::to_string(N) +
                     " columns");
  }
  Tensor out({N});
  for (std::size_t i = 0; i < N; ++i) {
    double acc = 0.0;
    for (std::size_t l = 0; l < L; ++l) acc += xv(l, i) * xv(l, anchor);
    out[i] = acc;
  }
  if (counter != nullptr) *counter += N;
  const std::size_t xi = X.id();
  return g.record(std::move(out), {xi}, [xi, anchor, L, N](Graph& gr, std::size_t self) {
    const Tensor& gy = gr.grad(self);
    const Tensor& xv = gr.value(xi);
    Tensor& gx = gr.grad_buffer(xi);
    // s_i = <x_i, x_m>: ds_i/dx_i = x_m and ds_i/dx_m = x_i (twice for i == m).
    for (std::size_t i = 0; i < N; ++i) {
      for (std::size_t l = 0; l < L; ++l) {
        gx(l, i) += gy[i] * xv(l, anchor);
        gx(l, anchor) += gy[i] * xv(l, i);
      }
    }
  });
}

Var reshape(const Var& x, Shape shape) {
  Graph& g = graph_of(x);
  Tensor out = x.value().reshaped(std::move(shape));
  const std::size_t xi = x.id();
  return g.record(std::move(out), {xi}, [xi](Graph& gr, std::size_t self) {
    accumulate(gr, xi, gr.grad(self).data());
  });
}

Var conv2d(const Var& x, const Var& kernels, const std::optional<Var>& bias, std::size_t stride) {
  Graph& g = graph_of(x, kernels);
  const Tensor& xv = x.value();
  const Tensor& kv = kernels.value();
  if (xv.rank() != 3 || kv.rank() != 4 || kv.dim(1) != xv.dim(0) || kv.dim(2) != kv.dim(3)) {
    throw DimensionError("conv2d: kernels " + kv.shape_string() + " incompatible with input " + xv.shape_string());
  }
  if (stride == 0) throw DomainError("conv2d: stride must be positive");
  const std::size_t C = xv.dim(0), H = xv.dim(1), W = xv.dim(2);
  const std::size_t F = kv.dim(0), k = kv.dim(2);
  if (k > H || k > W) {
    throw DimensionError("conv2d: kernel " + kv.shape_string() + " larger than input " + xv.shape_string());
  }
  const std::size_t Ho = (H - k) / stride + 1, Wo = (W - k) / stride + 1;
  Tensor out({F, Ho, Wo});
  std::vector<std::size_t> inputs{x.id(), kernels.id()};
  std::optional<std::size_t> bi;
  if (bias) {
    graph_of(x, *bias);
    if (bias->value().rank() != 1 || bias->value().dim(0) != F) {
      throw DimensionError("conv2d: bias " + bias->value().shape_string() + " incompatible with kernels " +
                           kv.shape_string());
    }
    bi = bias->id();
    inputs.push_back(*bi);
  }
  const double* xp = xv.data().data();
  const double* kp = kv.data().data();
  double* op = out.data().data();
  for (std::size_t f = 0; f < F; ++f) {
    double* of = op + f * Ho * Wo;
    if (bias) std::fill(of, of + Ho * Wo, bias->value()[f]);
    for (std::size_t c = 0; c < C; ++c) {
      const double* xc = xp + c * H * W;
      const double* kfc = kp + (f * C + c) * k * k;
      for (std::size_t u = 0; u < k; ++u) {
        for (std::size_t v = 0; v < k; ++v) {
          const double w = kfc[u * k + v];
          for (std::size_t i = 0; i < Ho; ++i) {
            const double* xrow = xc + (i * stride + u) * W + v;
            double* orow = of + i * Wo;
            for (std::size_t j = 0; j < Wo; ++j) orow[j] += w * xrow[j * stride];
          }
        }
      }
    }
  }
  const std::size_t xi = x.id(), ki = kernels.id();
  return g.record(std::move(out), std::move(inputs),
                  [xi, ki, bi, C, H, W, F, k, Ho, Wo, stride](Graph& gr, std::size_t self) {
                    const double* gy = gr.grad(self).data().data();
                    const bool need_x = gr.requires_grad(xi);
                    const bool need_k = gr.requires_grad(ki);
                    const double* xp = gr.value(xi).data().data();
                    const double* kp = gr.value(ki).data().data();
                    double* gx = need_x ? gr.grad_buffer(xi).data().data() : nullptr;
                    double* gk = need_k ? gr.grad_buffer(ki).data().data() : nullptr;
                    for (std::size_t f = 0; f < F; ++f) {
                      const double* gf = gy + f * Ho * Wo;
                      for (std::size_t c = 0; c < C; ++c) {
                        const double* xc = xp + c * H * W;
                        const std::size_t kbase = (f * C + c) * k * k;
                        for (std::size_t u = 0; u < k; ++u) {
                          for (std::size_t v = 0; v < k; ++v) {
                            const double w = kp[kbase + u * k + v];
                            double acc = 0.0;
                            for (std::size_t i = 0; i < Ho; ++i) {
                              const std::size_t xoff = c * H * W + (i * stride + u) * W + v;
                              const double* grow = gf + i * Wo;
                              for (std::size_t j = 0; j < Wo; ++j) {
                                acc += grow[j] * xc[(i * stride + u) * W + v + j * stride];
                                if (gx != nullptr) gx[xoff + j * stride] += w * grow[j];
                              }
                            }
                            if (gk != nullptr) gk[kbase + u * k + v] += acc;
                          }
                        }
                      }
                    }
                    if (bi && gr.requires_grad(*bi)) {
                      Tensor& gb = gr.grad_buffer(*bi);
                      for (std::size_t f = 0; f < F; ++f) {
                        double acc = 0.0;
                        for (std::size_t p = 0; p < Ho * Wo; ++p) acc += gy[f * Ho * Wo + p];
                        gb[f] += acc;
                      }
                    }
                  });
}

Var maxpool2d(const Var& x, std::size_t window, std::size_t stride) {
  Graph& g = graph_of(x);
  const Tensor& xv = x.value();
  if (xv.rank() != 3) throw DimensionError("maxpool2d: expected [C x H x W], got " + xv.shape_string());
  if (window == 0 || stride == 0) throw DomainError("maxpool2d: window and stride must be positive");
  const std::size_t C = xv.dim(0), H = xv.dim(1), W = xv.dim(2);
  if (window > H || window > W) {
    throw DimensionError("maxpool2d: window " + std::to_string(window) + " larger than input " + xv.shape_string());
  }
  if ((H - window) % stride != 0 || (W - window) % stride != 0) {
    throw DimensionError("maxpool2d: window " + std::to_string(window) + " / stride " + std::to_string(stride) +
                         " do not tile input " + xv.shape_string());
  }
  const std::size_t Ho = (H - window) / stride + 1, Wo = (W - window) / stride + 1;
  Tensor out({C, Ho, Wo});
  std::vector<std::size_t> arg(C * Ho * Wo);
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t i = 0; i < Ho; ++i) {
      for (std::size_t j = 0; j < Wo; ++j) {
        std::size_t best = c * H * W + (i * stride) * W + j * stride;
        for (std::size_t u = 0; u < window; ++u) {
          for (std::size_t v = 0; v < window; ++v) {
            const std::size_t idx = c * H * W + (i * stride + u) * W + (j * stride + v);
            if (xv[idx] > xv[best]) best = idx;
          }
        }
        const std::size_t o = (c * Ho + i) * Wo + j;
        out[o] = xv[best];
        arg[o] = best;
      }
    }
  }
  const std::size_t xi = x.id();
  return g.record(std::move(out), {xi}, [xi, arg = std::move(arg)](Graph& gr, std::size_t self) {
    const Tensor& gy = gr.grad(self);
    Tensor& gx = gr.grad_buffer(xi);
    for (std::size_t o = 0; o < arg.size(); ++o) gx[arg[o]] += gy[o];
  });
}

}  // namespace dsmil
