#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dsmil/tensor.hpp"

namespace dsmil {

/// A learnable tensor with its accumulated gradient.
struct Parameter {
  Parameter() = default;
  Parameter(std::string name, Tensor value);

  void zero_grad();

  std::string name;
  Tensor value;
  Tensor grad;
};

void zero_grads(std::span<Parameter* const> params);

class Graph;

/// Handle to a node of a Graph. Cheap to copy; valid while the graph lives.
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t size() const { return value().size(); }
  /// Value of a scalar node.
  double item() const { return value().item(); }

  Graph& graph() const { return *graph_; }
  std::size_t id() const { return id_; }
  bool valid() const { return graph_ != nullptr; }

 private:
  friend class Graph;
  Var(Graph* graph, std::size_t id) : graph_(graph), id_(id) {}

  Graph* graph_ = nullptr;
  std::size_t id_ = 0;
};

/// Tape of operations recorded during one forward pass.
///
/// Nodes are appended in execution order, which is a topological order.
/// backward() walks the tape once in reverse and adds d(loss)/d(value) into
/// Parameter::grad for every parameter leaf that reaches the loss. Gradients
/// accumulate; callers zero them between optimizer steps. A graph supports a
/// single backward pass.
class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, std::size_t self)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var constant(Tensor value);

  /// Leaf bound to a parameter. A non-trainable leaf behaves as a constant
  /// and receives no gradient.
  Var param(Parameter& p, bool trainable = true);

  /// Appends an operation node. `backward` is only invoked when the node
  /// received a gradient and one of `inputs` requires one.
  Var record(Tensor value, std::vector<std::size_t> inputs, BackwardFn backward);

  void backward(const Var& loss);

  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  const Tensor& grad(std::size_t id) const { return nodes_[id].grad; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  /// Gradient buffer of a node, allocated as zeros on first use. Only called
  /// from backward functions.
  Tensor& grad_buffer(std::size_t id);

  std::size_t size() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    Parameter* param = nullptr;
    bool requires_grad = false;
  };

  std::deque<Node> nodes_;
  bool consumed_ = false;
};

// ---------------------------------------------------------------------------
// Differentiable operations. Every operation records a node on the graph of
// its first operand; mixing graphs is a usage error.
// ---------------------------------------------------------------------------

struct MaxResult {
  Var value;  // scalar
  std::size_t index = 0;
};

/// out[m] = sum_l W[m,l] x[l] (+ b[m]).
Var linear(const Var& x, const Var& W, const std::optional<Var>& b = std::nullopt);

/// [M x L] * [L x N] -> [M x N].
Var matmul(const Var& A, const Var& B);

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double factor);
Var add_scalar(const Var& a, double offset);
/// wa * a + wb * b, evaluated in exactly that form.
Var weighted_add(const Var& a, double wa, const Var& b, double wb);
Var square(const Var& a);
Var sum(const Var& a);
Var mean(const Var& a);
Var dot(const Var& a, const Var& b);

Var relu(const Var& x);
Var tanh(const Var& x);
Var sigmoid(const Var& x);

/// Numerically stable softmax of a vector.
Var softmax(const Var& x);

/// Maximum entry and the smallest index attaining it. The gradient flows to
/// that single entry.
MaxResult reduce_max_with_index(const Var& x);

/// out = sum_i a[i] * V[:, i] for V of shape [L x N], summed in index order.
Var weighted_sum(const Var& V, const Var& a);

/// Stacks N vectors of length L into an [L x N] matrix.
Var stack_columns(std::span<const Var> columns);

/// Column i of an [L x N] matrix as a vector of length L.
Var column(const Var& X, std::size_t i);

/// Per-row maximum / mean across the columns of an [L x N] matrix.
Var row_max(const Var& X);
Var row_mean(const Var& X);

/// s[i] = <X[:, i], X[:, anchor]> for an [L x N] matrix. Adds the number of
/// inner products evaluated to *counter when given.
Var column_dots(const Var& X, std::size_t anchor, std::size_t* counter = nullptr);

Var reshape(const Var& x, Shape shape);

/// Valid cross-correlation of x [C x H x W] with kernels [F x C x k x k].
Var conv2d(const Var& x, const Var& kernels, const std::optional<Var>& bias, std::size_t stride = 1);

/// Max pooling over window x window patches of x [C x H x W]. Ties route
/// the gradient to the first maximum in row-major window order.
Var maxpool2d(const Var& x, std::size_t window, std::size_t stride);

}  // namespace dsmil
