#include "more/graph.hpp"

#include <string>

#include "more/error.hpp"

namespace more {

const Tensor& Var::value() const {
  require(graph_ != nullptr, Errc::disconnected_tensor, "Var not bound to a graph");
  return graph_->value(*this);
}

Var Graph::constant(Tensor value) {
  require(value.all_finite(), Errc::non_finite, "constant contains NaN/Inf");
  nodes_.push_back(Node{"constant", std::move(value), {}, {}, false});
  return Var(this, nodes_.size() - 1);
}

Var Graph::variable(Tensor value) {
  require(value.all_finite(), Errc::non_finite, "variable contains NaN/Inf");
  nodes_.push_back(Node{"variable", std::move(value), {}, {}, true});
  return Var(this, nodes_.size() - 1);
}

void Graph::check_owned(Var v) const {
  require(v.graph() == this && v.id() < nodes_.size(), Errc::disconnected_tensor,
          "Var belongs to a different graph");
}

Var Graph::record(std::string_view op, Tensor value, std::vector<Var> inputs, BackwardFn backward) {
  if (!value.all_finite()) fail(Errc::non_finite, std::string(op) + " produced NaN/Inf");
  Node node;
  node.op = op;
  node.value = std::move(value);
  node.inputs.reserve(inputs.size());
  for (Var in : inputs) {
    check_owned(in);
    node.inputs.push_back(in.id());
    node.requires_grad = node.requires_grad || nodes_[in.id()].requires_grad;
  }
  if (node.requires_grad) node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

std::vector<Tensor> Graph::backward(Var loss, std::span<const Var> wrt) const {
  check_owned(loss);
  require(value(loss).size() == 1, Errc::shape_mismatch,
          "backward needs a scalar loss, got " + shape_string(value(loss).shape()));
  const std::size_t n = loss.id() + 1;

  // Nodes that depend on some wrt node through differentiable edges.
  std::vector<char> is_wrt(n, 0), depends(n, 0);
  std::vector<char> reaches(n - 1, 0);
  reaches.push_back(1);
  for (Var w : wrt) {
    check_owned(w);
    if (w.id() < n) is_wrt[w.id()] = 1;
  }
  for (std::size_t i = 0; i < n; ++i) {
    depends[i] = is_wrt[i];
    if (!nodes_[i].backward) continue;
    for (std::size_t in : nodes_[i].inputs) depends[i] = depends[i] || depends[in];
  }
  // Nodes from which the loss is reachable through differentiable edges.
  for (std::size_t i = n; i-- > 0;) {
    if (!reaches[i] || !nodes_[i].backward) continue;
    for (std::size_t in : nodes_[i].inputs) reaches[in] = 1;
  }
  for (Var w : wrt) {
    if (w.id() >= n || !reaches[w.id()]) {
      fail(Errc::disconnected_tensor, "node " + std::to_string(w.id()) + " is not reachable from the loss");
    }
  }

  std::vector<Tensor> grads(n);
  grads[loss.id()] = Tensor::full(value(loss).shape(), 1.0f);
  std::vector<const Tensor*> in_values;
  std::vector<Tensor*> in_grads;

  for (std::size_t i = n; i-- > 0;) {
    const Node& node = nodes_[i];
    if (!node.backward || !depends[i] || !reaches[i] || grads[i].empty()) continue;
    in_values.clear();
    in_grads.clear();
    for (std::size_t in : node.inputs) {
      in_values.push_back(&nodes_[in].value);
      if (depends[in] && reaches[in]) {
        if (grads[in].empty()) grads[in] = Tensor::zeros(nodes_[in].value.shape());
        in_grads.push_back(&grads[in]);
      } else {
        in_grads.push_back(nullptr);
      }
    }
    node.backward(BackwardContext{in_values, node.value, grads[i], in_grads});
    if (!is_wrt[i]) grads[i] = Tensor();
  }

  std::vector<Tensor> out;
  out.reserve(wrt.size());
  for (Var w : wrt) {
    Tensor g = grads[w.id()].empty() ? Tensor::zeros(nodes_[w.id()].value.shape()) : grads[w.id()];
    out.push_back(std::move(g));
  }
  return out;
}

}  // namespace more
