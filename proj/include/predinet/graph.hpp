#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "predinet/errors.hpp"
#include "predinet/tensor.hpp"

namespace predinet {

template <class T>
class Graph;

/// Handle to a node of a Graph. Cheap to copy; valid while the graph lives.
template <class T = float>
struct Var {
  Graph<T>* graph = nullptr;
  std::size_t id = 0;

  const Tensor<T>& value() const { return graph->value(id); }
  const Shape& shape() const { return value().shape(); }
  std::span<const T> grad() const { return graph->grad(id); }
};

/// Append-only tape for reverse-mode differentiation. Nodes are recorded in
/// evaluation order, so every input id precedes its consumer and a reverse
/// sweep over ids is a valid topological order.
template <class T = float>
class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, std::size_t self)>;

  struct Node {
    const char* op = "";
    std::vector<std::size_t> inputs;
    Tensor<T> owned;
    const Tensor<T>* ref = nullptr;  // parameter leaves alias their tensor
    Tensor<T>* param = nullptr;
    std::vector<T> grad;
    bool needs_grad = false;
    BackwardFn backward;

    const Tensor<T>& value() const { return ref ? *ref : owned; }
  };

  Graph() = default;
  /// With `grad_enabled` false, parameters are recorded as constants and no
  /// backward closures are kept (evaluation mode).
  explicit Graph(bool grad_enabled) : grad_enabled_(grad_enabled) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  /// Leaf holding data that never receives a gradient.
  Var<T> constant(Tensor<T> value) { return leaf(std::move(value), false); }

  /// Leaf whose gradient is kept on the node (read it back with grad()).
  Var<T> variable(Tensor<T> value) { return leaf(std::move(value), grad_enabled_); }

  /// Leaf aliasing a model parameter. Gradients are added into `p.grad()`
  /// at the end of backward() when `p.requires_grad()` is set.
  Var<T> parameter(Tensor<T>& p) {
    Node n;
    n.op = "parameter";
    n.ref = &p;
    n.param = &p;
    n.needs_grad = grad_enabled_ && p.requires_grad();
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
  }

  /// Records an op output. The node needs a gradient iff any input does.
  Var<T> record(const char* op, std::vector<std::size_t> inputs, Tensor<T> value, BackwardFn backward) {
    Node n;
    n.op = op;
    for (auto id : inputs) {
      if (id >= nodes_.size()) throw UsageError(std::string(op) + ": input id out of range");
      n.needs_grad = n.needs_grad || nodes_[id].needs_grad;
    }
    n.inputs = std::move(inputs);
    n.owned = std::move(value);
    if (n.needs_grad) n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
  }

  const Tensor<T>& value(std::size_t id) const { return nodes_.at(id).value(); }
  const Node& node(std::size_t id) const { return nodes_.at(id); }
  std::size_t size() const noexcept { return nodes_.size(); }
  bool needs_grad(std::size_t id) const { return nodes_.at(id).needs_grad; }

  std::span<const T> grad(std::size_t id) const { return nodes_.at(id).grad; }

  /// Gradient buffer of a node, allocated (zeroed) on first use.
  std::span<T> grad_buffer(std::size_t id) {
    auto& n = nodes_[id];
    if (n.grad.empty()) n.grad.assign(n.value().size(), T{0});
    return n.grad;
  }

  void backward(Var<T> loss) { backward(loss.id); }

  void backward(std::size_t loss) {
    if (loss >= nodes_.size()) throw UsageError("backward: unknown node");
    if (nodes_[loss].value().size() != 1) {
      throw UsageError("backward: loss must be scalar, got shape " + to_string(nodes_[loss].value().shape()));
    }
    if (!nodes_[loss].needs_grad) return;
    grad_buffer(loss)[0] = T{1};
    for (std::size_t id = loss + 1; id-- > 0;) {
      auto& n = nodes_[id];
      if (!n.needs_grad || n.grad.empty()) continue;
      if (n.backward) n.backward(*this, id);
    }
    for (auto& n : nodes_) {
      if (!n.param || !n.needs_grad || n.grad.empty()) continue;
      if (!n.param->has_grad()) n.param->zero_grad();
      auto g = n.param->grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
    }
  }

 private:
  Var<T> leaf(Tensor<T> value, bool needs_grad) {
    Node n;
    n.op = needs_grad ? "variable" : "constant";
    n.owned = std::move(value);
    n.needs_grad = needs_grad;
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
  }

  std::vector<Node> nodes_;
  bool grad_enabled_ = true;
};

}  // namespace predinet
