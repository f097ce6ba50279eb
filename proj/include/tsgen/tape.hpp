#pragma once

#include <functional>
#include <unordered_map>
#include <utility>
#include <vector>

#include "tsgen/tensor.hpp"

namespace tsgen {

// Handle into a Tape. Invalid (id < 0) means "absent", e.g. a skipped bias.
struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

// Reverse-mode accumulation over a recorded computation graph. Every forward
// operation appends a node holding its output value and a closure that routes
// the node's gradient to its inputs. backward() replays the closures in
// reverse emission order, which is a valid topological order by construction.
//
// One tape per training step; reset() keeps the node storage allocated.
template <typename T>
class Tape {
 public:
  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

  bool grad_enabled() const { return grad_enabled_; }

  Var leaf(Tensor<T> value, bool needs_grad = false) {
    return push(std::move(value), needs_grad && grad_enabled_, nullptr);
  }

  // Leaf for a parameter tensor, cached by address so repeated use of the
  // same tensor within one step shares a node (and its gradient).
  Var param(Tensor<T>& t, bool trainable = true) {
    auto it = param_ids_.find(&t);
    if (it != param_ids_.end()) return Var{it->second};
    Var v = push(t, trainable && grad_enabled_, nullptr);
    param_ids_.emplace(&t, v.id);
    return v;
  }

  Var emit(Tensor<T> value, bool needs_grad, std::function<void(Tape&, int)> back) {
    needs_grad = needs_grad && grad_enabled_;
    return push(std::move(value), needs_grad, needs_grad ? std::move(back) : nullptr);
  }

  const Tensor<T>& val(Var v) const { return nodes_[check(v)].value; }

  bool needs_grad(Var v) const { return v.valid() && nodes_[v.id].needs_grad; }

  // Gradient sink for node v; allocates zeros on first touch.
  Tensor<T>& grad_sink(Var v) {
    Node& n = nodes_[check(v)];
    if (!n.grad_live) {
      n.grad = Tensor<T>::zeros(n.value.shape);
      n.grad_live = true;
    }
    return n.grad;
  }

  const Tensor<T>& grad(Var v) const { return nodes_[check(v)].grad; }
  bool has_grad(Var v) const { return v.valid() && nodes_[v.id].grad_live; }

  // Seeds d(out)/d(out) = 1 and propagates. `out` must be scalar.
  void backward(Var out) {
    if (nodes_[check(out)].value.numel() != 1)
      throw ShapeError("backward expects a scalar output");
    grad_sink(out).data[0] = T(1);
    for (int id = out.id; id >= 0; --id) {
      Node& n = nodes_[id];
      if (n.needs_grad && n.grad_live && n.back) n.back(*this, id);
    }
  }

  // Gradient of a parameter tensor bound via param(); nullptr if the
  // parameter never entered the graph or received no gradient.
  const Tensor<T>* param_grad(const Tensor<T>& t) const {
    auto it = param_ids_.find(&t);
    if (it == param_ids_.end()) return nullptr;
    const Node& n = nodes_[it->second];
    return n.grad_live ? &n.grad : nullptr;
  }

  void reset() {
    nodes_.clear();
    param_ids_.clear();
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    std::function<void(Tape&, int)> back;
    bool needs_grad = false;
    bool grad_live = false;
  };

  int check(Var v) const {
    if (!v.valid() || v.id >= static_cast<int>(nodes_.size()))
      throw ShapeError("invalid tape variable");
    return v.id;
  }

  Var push(Tensor<T> value, bool needs_grad, std::function<void(Tape&, int)> back) {
    Node n;
    n.value = std::move(value);
    n.back = std::move(back);
    n.needs_grad = needs_grad;
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  std::vector<Node> nodes_;
  std::unordered_map<const void*, int> param_ids_;
  bool grad_enabled_;
};

}  // namespace tsgen
