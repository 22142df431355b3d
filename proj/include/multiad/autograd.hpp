#pragma once

#include <deque>
#include <functional>
#include <optional>
#include <span>
#include <unordered_map>
#include <utility>
#include <vector>

#include "multiad/tensor.hpp"

namespace multiad {

template <class S>
class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; only valid while the
/// owning tape is alive.
template <class S>
struct Var {
  Tape<S>* tape = nullptr;
  int id = -1;

  const Tensor<S>& value() const { return tape->value(*this); }
  const Shape& shape() const { return value().shape(); }
  Index dim(std::size_t axis) const { return value().dim(axis); }
  bool valid() const { return tape != nullptr && id >= 0; }
};

/// Reverse-mode computation tape. Records are appended in evaluation order,
/// so the record list is topologically sorted by construction; backward()
/// walks it once in reverse and then marks the tape consumed.
template <class S>
class Tape {
 public:
  using Vector = VectorX<S>;
  using BackwardFn = std::function<void(Tape&, const Vector&)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Trainable parameter leaf. Gradients land in `p.grad()` on backward.
  /// Repeated calls with the same tensor return the same leaf.
  Var<S> param(Tensor<S>& p) {
    if (auto it = param_ids_.find(&p); it != param_ids_.end()) return {this, it->second};
    Node node;
    node.external = &p;
    node.sink = &p;
    node.requires_grad = true;
    const int id = push(std::move(node));
    param_ids_.emplace(&p, id);
    return {this, id};
  }

  /// Read-only reference to a tensor that must outlive the tape; never tracked.
  Var<S> frozen(const Tensor<S>& p) {
    Node node;
    node.external = &p;
    return {this, push(std::move(node))};
  }

  Var<S> constant(Tensor<S> value) {
    Node node;
    node.owned = std::move(value);
    return {this, push(std::move(node))};
  }

  /// Gradient-tracked input leaf owned by the tape (used by gradient checks
  /// and to obtain d(loss)/d(input)).
  Var<S> input(Tensor<S> value) {
    Node node;
    node.owned = std::move(value);
    node.requires_grad = true;
    return {this, push(std::move(node))};
  }

  /// Appends an op result. `fn` is kept only when some input is tracked.
  Var<S> record(Tensor<S> value, std::initializer_list<Var<S>> inputs, BackwardFn fn) {
    return record(std::move(value), std::span<const Var<S>>(inputs.begin(), inputs.size()), std::move(fn));
  }

  Var<S> record(Tensor<S> value, std::span<const Var<S>> inputs, BackwardFn fn) {
    ensure_open();
    if (!value.all_finite()) {
      throw NumericError("non-finite value produced by op at tape record " + std::to_string(nodes_.size()));
    }
    Node node;
    node.owned = std::move(value);
    for (const Var<S>& v : inputs) {
      check_owner(v);
      if (nodes_[v.id].requires_grad) node.requires_grad = true;
    }
    if (node.requires_grad) node.backward = std::move(fn);
    return {this, push(std::move(node))};
  }

  const Tensor<S>& value(const Var<S>& v) const {
    check_owner(v);
    const Node& n = nodes_[v.id];
    return n.external ? *n.external : n.owned;
  }

  bool requires_grad(const Var<S>& v) const {
    check_owner(v);
    return nodes_[v.id].requires_grad;
  }

  /// Adds `g` into the gradient buffer of `v`. No-op for untracked values.
  void accumulate(const Var<S>& v, const Vector& g) {
    Node& n = nodes_[v.id];
    if (!n.requires_grad) return;
    if (!n.grad) {
      n.grad = g;
    } else {
      *n.grad += g;
    }
  }

  /// Mutable gradient buffer for in-place accumulation, zero-initialized.
  Vector& grad_buffer(const Var<S>& v) {
    Node& n = nodes_[v.id];
    if (!n.grad) n.grad = Vector::Zero(value(v).size());
    return *n.grad;
  }

  /// Gradient of the last backward pass with respect to `v`, if it received one.
  const Vector* grad(const Var<S>& v) const {
    check_owner(v);
    const Node& n = nodes_[v.id];
    return n.grad ? &*n.grad : nullptr;
  }

  void backward(const Var<S>& loss) {
    ensure_open();
    check_owner(loss);
    if (value(loss).size() != 1) {
      throw ShapeError("backward requires a scalar loss, got " + shape_string(value(loss).shape()));
    }
    consumed_ = true;
    if (!nodes_[loss.id].requires_grad) return;
    nodes_[loss.id].grad = Vector::Ones(1);
    for (int id = loss.id; id >= 0; --id) {
      Node& n = nodes_[id];
      if (!n.grad) continue;
      if (n.backward) {
        BackwardFn fn = std::move(n.backward);
        n.backward = nullptr;
        fn(*this, *n.grad);
      }
      if (n.sink) n.sink->grad() += *n.grad;
    }
  }

  bool consumed() const { return consumed_; }
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor<S> owned;
    const Tensor<S>* external = nullptr;
    Tensor<S>* sink = nullptr;
    bool requires_grad = false;
    BackwardFn backward;
    std::optional<Vector> grad;
  };

  int push(Node node) {
    ensure_open();
    nodes_.push_back(std::move(node));
    return static_cast<int>(nodes_.size()) - 1;
  }

  void ensure_open() const {
    if (consumed_) throw StateError("tape already consumed by a backward pass");
  }

  void check_owner(const Var<S>& v) const {
    if (v.tape != this || v.id < 0 || v.id >= static_cast<int>(nodes_.size())) {
      throw StateError("variable does not belong to this tape");
    }
  }

  std::deque<Node> nodes_;  // stable addresses: ops hold references across records
  std::unordered_map<const Tensor<S>*, int> param_ids_;
  bool consumed_ = false;
};

}  // namespace multiad
