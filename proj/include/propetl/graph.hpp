#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "propetl/tensor.hpp"

namespace propetl {

/// Trainable leaf. The gradient buffer stays empty until a backward pass
/// reaches the parameter; frozen parameters never allocate one.
template <typename T>
struct BasicParameter {
  std::string name;
  BasicTensor<T> value;
  BasicTensor<T> grad;
  bool requires_grad = true;

  BasicParameter() = default;
  BasicParameter(std::string n, BasicTensor<T> v, bool trainable = true)
      : name(std::move(n)), value(std::move(v)), requires_grad(trainable) {}

  bool has_grad() const { return !grad.empty(); }
  void zero_grad() { grad = BasicTensor<T>(); }
  std::size_t numel() const { return value.numel(); }

  template <typename U>
  BasicParameter<U> cast() const {
    return BasicParameter<U>(name, value.template cast<U>(), requires_grad);
  }
};

using Parameter = BasicParameter<float>;

template <typename T>
class BasicGraph;

/// Handle to a node of a BasicGraph.
template <typename T>
struct BasicVar {
  BasicGraph<T>* graph = nullptr;
  std::size_t id = 0;

  const BasicTensor<T>& value() const { return graph->value(*this); }
  const Shape& shape() const { return value().shape(); }
};

/// What an op's backward rule sees. Input gradient slots are null for inputs
/// that do not need a gradient; non-null slots must be accumulated into
/// (an input may appear twice in one op).
template <typename T>
struct BackwardContext {
  const BasicTensor<T>& out;
  const BasicTensor<T>& out_grad;
  std::span<const BasicTensor<T>* const> in;
  std::span<BasicTensor<T>* const> in_grad;
};

template <typename T>
using BackwardFn = std::function<void(const BackwardContext<T>&)>;

/// Reverse-mode tape. One graph per training step: nodes are appended in
/// topological order by construction, and backward() may run once.
template <typename T>
class BasicGraph {
 public:
  using Var = BasicVar<T>;

  BasicGraph() = default;
  BasicGraph(const BasicGraph&) = delete;
  BasicGraph& operator=(const BasicGraph&) = delete;

  Var constant(BasicTensor<T> value) {
    require_finite("constant", value);
    return append("constant", std::move(value), {}, nullptr, nullptr, false);
  }

  /// Leaf bound to a parameter; backward() accumulates into param.grad when
  /// the parameter requires a gradient.
  Var param(BasicParameter<T>& p) {
    require_finite("param", p.value);
    return append("param", p.value, {}, nullptr, &p, p.requires_grad);
  }

  /// Appends an op node. The backward rule is dropped when no input needs a
  /// gradient.
  Var push(std::string_view op, BasicTensor<T> value, std::vector<std::size_t> inputs,
           BackwardFn<T> backward) {
    bool needs = false;
    for (const std::size_t in : inputs) {
      if (in >= nodes_.size()) throw Error(std::string(op) + ": input id out of range");
      needs = needs || nodes_[in].needs_grad;
    }
    if (!needs) backward = nullptr;
    return append(op, std::move(value), std::move(inputs), std::move(backward), nullptr, needs);
  }

  const BasicTensor<T>& value(Var v) const { return node(v).value; }

  bool needs_grad(Var v) const { return node(v).needs_grad; }

  /// Gradient of the last backward() w.r.t. any node (zeros if unreached).
  BasicTensor<T> grad(Var v) const {
    const Node& n = node(v);
    if (n.grad.empty()) return BasicTensor<T>(n.value.shape());
    return n.grad;
  }

  std::string_view op_name(Var v) const { return node(v).op; }
  const std::vector<std::size_t>& inputs(Var v) const { return node(v).inputs; }

  std::size_t size() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }

  void backward(Var loss) {
    if (consumed_) throw Error("backward: graph already consumed; reset() before reuse");
    Node& root = node(loss);
    if (root.value.numel() != 1) {
      throw ShapeError("backward: loss must be scalar, got " + shape_str(root.value.shape()));
    }
    consumed_ = true;
    if (!root.needs_grad) return;
    root.grad = BasicTensor<T>(root.value.shape(), T(1));

    std::vector<const BasicTensor<T>*> in_vals;
    std::vector<BasicTensor<T>*> in_grads;
    std::deque<std::pair<std::size_t, BasicTensor<T>>> scratch;
    for (std::size_t id = loss.id + 1; id-- > 0;) {
      Node& n = nodes_[id];
      if (!n.needs_grad || n.grad.empty()) continue;
      if (n.param != nullptr) {
        BasicParameter<T>& p = *n.param;
        if (p.grad.empty()) p.grad = BasicTensor<T>(p.value.shape());
        for (std::size_t i = 0; i < n.grad.numel(); ++i) p.grad[i] += n.grad[i];
        continue;
      }
      if (!n.backward) continue;
      in_vals.clear();
      in_grads.clear();
      scratch.clear();
      for (const std::size_t in : n.inputs) {
        Node& src = nodes_[in];
        in_vals.push_back(&src.value);
        if (!src.needs_grad) {
          in_grads.push_back(nullptr);
        } else if (src.grad.empty()) {
          src.grad = BasicTensor<T>(src.value.shape());
          in_grads.push_back(&src.grad);
        } else {
          // Later consumers sum into scratch, added to the node in one step.
          scratch.emplace_back(in, BasicTensor<T>(src.value.shape()));
          in_grads.push_back(&scratch.back().second);
        }
      }
      n.backward(BackwardContext<T>{n.value, n.grad, in_vals, in_grads});
      for (auto& [in, g] : scratch) {
        auto& dst = nodes_[in].grad;
        for (std::size_t i = 0; i < g.numel(); ++i) dst[i] += g[i];
      }
    }
  }

  void reset() {
    nodes_.clear();
    consumed_ = false;
  }

 private:
  struct Node {
    std::string_view op;
    BasicTensor<T> value;
    BasicTensor<T> grad;
    std::vector<std::size_t> inputs;
    BackwardFn<T> backward;
    BasicParameter<T>* param = nullptr;
    bool needs_grad = false;
  };

  Var append(std::string_view op, BasicTensor<T> value, std::vector<std::size_t> inputs,
             BackwardFn<T> backward, BasicParameter<T>* param, bool needs) {
    if (consumed_) throw Error(std::string(op) + ": graph already consumed; reset() before reuse");
    nodes_.push_back(Node{op, std::move(value), {}, std::move(inputs), std::move(backward), param, needs});
    return Var{this, nodes_.size() - 1};
  }

  const Node& node(Var v) const {
    if (v.graph != this || v.id >= nodes_.size()) throw Error("graph: variable does not belong to this graph");
    return nodes_[v.id];
  }
  Node& node(Var v) {
    if (v.graph != this || v.id >= nodes_.size()) throw Error("graph: variable does not belong to this graph");
    return nodes_[v.id];
  }

  std::deque<Node> nodes_;
  bool consumed_ = false;
};

using Graph = BasicGraph<float>;
using Var = BasicVar<float>;

}  // namespace propetl
