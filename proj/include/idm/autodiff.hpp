#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <initializer_list>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "idm/errors.hpp"
#include "idm/tensor.hpp"

namespace idm {

template <typename T>
class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; valid while the tape
/// lives.
template <typename T>
class Var {
 public:
  Var() = default;

  const Tensor<T>& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;
  Tape<T>& tape() const { return *tape_; }
  std::size_t id() const noexcept { return id_; }
  bool valid() const noexcept { return tape_ != nullptr; }

 private:
  friend class Tape<T>;
  Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Eager reverse-mode tape. Every op appends one node whose backward closure
/// pushes the output gradient into its inputs. A tape is consumed by exactly
/// one backward() call.
template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Tensor<T>& grad_out)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Raises NumericError whenever a recorded value is not finite.
  void set_verify_finite(bool on) noexcept { verify_finite_ = on; }

  Var<T> leaf(Tensor<T> value, bool requires_grad = false) {
    check_open();
    check_finite(value);
    nodes_.push_back(Node{std::move(value), {}, requires_grad, true, {}});
    return Var<T>(this, nodes_.size() - 1);
  }

  Var<T> constant(Tensor<T> value) { return leaf(std::move(value), false); }

  /// Appends an op output. The closure is kept only when some input needs a
  /// gradient.
  Var<T> record(Tensor<T> value, std::initializer_list<Var<T>> inputs,
                BackwardFn fn) {
    return record(std::move(value), std::span<const Var<T>>(inputs.begin(), inputs.size()),
                  std::move(fn));
  }

  Var<T> record(Tensor<T> value, std::span<const Var<T>> inputs, BackwardFn fn) {
    check_open();
    check_finite(value);
    bool needs = false;
    for (const auto& in : inputs) {
      if (in.tape_ != this) throw StateError("op mixes vars from different tapes");
      needs = needs || nodes_[in.id_].requires_grad;
    }
    nodes_.push_back(
        Node{std::move(value), {}, needs, false, needs ? std::move(fn) : BackwardFn{}});
    return Var<T>(this, nodes_.size() - 1);
  }

  void backward(const Var<T>& loss) {
    if (loss.tape_ != this) throw StateError("loss belongs to another tape");
    if (consumed_) throw StateError("backward called twice on the same tape");
    const Node& root = nodes_[loss.id_];
    if (root.value.size() != 1) {
      throw DimensionError("backward needs a scalar loss, got shape " +
                           to_string(root.value.shape()));
    }
    consumed_ = true;
    if (root.requires_grad) {
      nodes_[loss.id_].grad = Tensor<T>(root.value.shape(), T(1));
      for (std::size_t i = loss.id_ + 1; i-- > 0;) {
        Node& n = nodes_[i];
        if (n.backward && !n.grad.empty()) n.backward(*this, n.grad);
        n.backward = nullptr;
      }
    }
    for (auto& n : nodes_) {
      n.backward = nullptr;
      if (n.is_leaf && n.requires_grad && n.grad.empty()) {
        n.grad = Tensor<T>::zeros(n.value.shape());
      }
    }
  }

  const Tensor<T>& value(const Var<T>& v) const { return nodes_[v.id_].value; }
  bool requires_grad(const Var<T>& v) const { return nodes_[v.id_].requires_grad; }

  bool has_grad(const Var<T>& v) const { return !nodes_[v.id_].grad.empty(); }

  const Tensor<T>& grad(const Var<T>& v) const {
    const Node& n = nodes_[v.id_];
    if (n.grad.empty()) {
      throw StateError(n.requires_grad ? "gradient not populated; call backward first"
                                       : "gradient requested for a var that does not require it");
    }
    return n.grad;
  }

  /// Gradient buffer an op's backward closure accumulates into, or nullptr
  /// when the input does not participate in differentiation.
  Tensor<T>* grad_sink(const Var<T>& v) {
    Node& n = nodes_[v.id_];
    if (!n.requires_grad) return nullptr;
    if (n.grad.empty()) n.grad = Tensor<T>::zeros(n.value.shape());
    return &n.grad;
  }

  bool consumed() const noexcept { return consumed_; }
  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    bool is_leaf = false;
    BackwardFn backward;
  };

  void check_open() const {
    if (consumed_) throw StateError("tape already consumed by backward");
  }

  void check_finite(const Tensor<T>& t) const {
    if (verify_finite_ && !t.all_finite()) {
      throw NumericError("non-finite value recorded on tape (node " +
                         std::to_string(nodes_.size()) + ")");
    }
  }

  std::deque<Node> nodes_;
  bool consumed_ = false;
  bool verify_finite_ = false;
};

template <typename T>
const Tensor<T>& Var<T>::value() const {
  return tape_->value(*this);
}

template <typename T>
bool Var<T>::requires_grad() const {
  return tape_->requires_grad(*this);
}

}  // namespace idm
