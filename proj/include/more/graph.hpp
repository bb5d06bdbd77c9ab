#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <string_view>
#include <vector>

#include "more/tensor.hpp"

namespace more {

class Graph;

/// Handle to a node of a Graph. Cheap to copy; valid while its Graph lives.
class Var {
 public:
  Var() = default;
  Var(Graph* graph, std::size_t id) : graph_(graph), id_(id) {}

  Graph* graph() const noexcept { return graph_; }
  std::size_t id() const noexcept { return id_; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }

 private:
  Graph* graph_ = nullptr;
  std::size_t id_ = 0;
};

/// Arguments handed to an op's backward rule. grad_inputs[i] is null when
/// input i needs no gradient; otherwise the rule accumulates into it.
struct BackwardContext {
  std::span<const Tensor* const> inputs;
  const Tensor& output;
  const Tensor& grad_output;
  std::span<Tensor* const> grad_inputs;
};

using BackwardFn = std::function<void(const BackwardContext&)>;

/// Append-only reverse-mode tape. Nodes are stored in creation order, so the
/// tape is acyclic and every input precedes its consumer. One graph per
/// training or attack step; not shared between threads.
class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var constant(Tensor value);
  Var variable(Tensor value);

  // Registers an op output. The backward rule is kept only when some input
  // requires a gradient. Rejects non-finite outputs.
  Var record(std::string_view op, Tensor value, std::vector<Var> inputs, BackwardFn backward);

  const Tensor& value(Var v) const { return nodes_.at(v.id()).value; }
  bool requires_grad(Var v) const { return nodes_.at(v.id()).requires_grad; }
  std::string_view op(Var v) const { return nodes_.at(v.id()).op; }
  std::size_t size() const noexcept { return nodes_.size(); }

  /// Gradients of the scalar `loss` with respect to each of `wrt`, in order.
  /// Only nodes lying between wrt and loss are visited.
  std::vector<Tensor> backward(Var loss, std::span<const Var> wrt) const;

 private:
  struct Node {
    std::string_view op;
    Tensor value;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    bool requires_grad = false;
  };

  void check_owned(Var v) const;

  std::vector<Node> nodes_;
};

// ---- ops -------------------------------------------------------------------

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, float s);
Var sum(Var a);
Var mean(Var a);
Var relu(Var a);
Var reshape(Var a, Shape shape);

Var matmul(Var a, Var b);
// x[B×N] + bias[N] broadcast over rows.
Var add_bias(Var x, Var bias);
// x[B×In] · weight[In×Out] + bias[Out].
Var linear(Var x, Var weight, Var bias);

// Cross-correlation of x[B×C×H×W] with kernels[F×C×kh×kw].
Var conv2d(Var x, Var kernels, std::size_t stride, std::size_t pad);
// x[B×F×H×W] + bias[F] broadcast per channel.
Var add_channel_bias(Var x, Var bias);
// Non-overlapping max pooling with window = stride = `size`.
Var max_pool2d(Var x, std::size_t size);

// Softmax over the last dimension (rank 1 or 2).
Var softmax(Var z);
// Mean over the batch of -log softmax(logits)[label], fused log-sum-exp.
Var cross_entropy(Var logits, std::span<const int> labels);
// Σ_i weights[:, i] · experts[i], accumulated in index order.
Var weighted_sum(std::span<const Var> experts, Var weights);

// ---- plain tensor helpers (no graph) ---------------------------------------

Tensor softmax(const Tensor& z);
std::vector<float> cross_entropy_per_example(const Tensor& logits, std::span<const int> labels);
std::vector<int> argmax_rows(const Tensor& logits);

}  // namespace more
