#pragma once

#include <functional>
#include <memory>
#include <utility>
#include <vector>

#include "dwstrack/common.hpp"

namespace dwstrack {

template <typename T>
class TapeT;

namespace detail {

/// Shared storage behind a tensor handle. Values are immutable once the
/// tensor participates in a recorded graph; only the grad buffer and (for
/// parameters, between passes) the values may be rewritten.
template <typename T>
struct TensorStorage {
  Shape shape;
  std::vector<T> values;
  std::vector<T> grad;              // empty until a gradient is accumulated
  bool requires_grad = false;       // leaf flag
  bool tracked = false;             // produced by an op recorded on a tape
  const void* tape_tag = nullptr;   // identifies the recording tape
};

}  // namespace detail

/// Dense row-major N-d tensor with value semantics on the handle: copies
/// share storage. The element type selects the precision mode; float is the
/// working precision, double exists for gradient-check suites.
template <typename T>
class TensorT {
 public:
  using Storage = detail::TensorStorage<T>;

  TensorT() = default;

  static TensorT zeros(Shape shape) { return full(std::move(shape), T(0)); }

  static TensorT full(Shape shape, T value) {
    TensorT t;
    t.s_ = std::make_shared<Storage>();
    int64_t n = shape_numel(shape);
    if (n < 0 || shape.empty())
      throw DimensionError("tensor shape must be non-empty with non-negative dims, got " +
                           shape_to_string(shape));
    t.s_->shape = std::move(shape);
    t.s_->values.assign(static_cast<size_t>(n), value);
    return t;
  }

  static TensorT from_values(Shape shape, std::vector<T> values) {
    if (shape_numel(shape) != static_cast<int64_t>(values.size()))
      throw DimensionError("value count " + std::to_string(values.size()) +
                           " does not match shape " + shape_to_string(shape));
    TensorT t;
    t.s_ = std::make_shared<Storage>();
    t.s_->shape = std::move(shape);
    t.s_->values = std::move(values);
    return t;
  }

  static TensorT scalar(T value) { return from_values({1}, {value}); }

  bool defined() const { return s_ != nullptr; }
  const Shape& shape() const { return s_->shape; }
  int rank() const { return static_cast<int>(s_->shape.size()); }
  int64_t dim(int i) const { return s_->shape.at(static_cast<size_t>(i)); }
  int64_t numel() const { return static_cast<int64_t>(s_->values.size()); }

  const std::vector<T>& values() const { return s_->values; }
  std::vector<T>& mutable_values() { return s_->values; }

  T item() const {
    if (numel() != 1)
      throw DimensionError("item(): tensor is not scalar, shape " + shape_to_string(s_->shape));
    return s_->values[0];
  }

  bool requires_grad() const { return s_->requires_grad; }
  TensorT& set_requires_grad(bool on = true) {
    s_->requires_grad = on;
    return *this;
  }

  bool has_grad() const { return !s_->grad.empty(); }

  const std::vector<T>& grad() const {
    if (s_->grad.empty())
      throw StateError("grad(): no gradient populated for this tensor");
    return s_->grad;
  }

  /// Grad buffer, allocated (zeroed) on first access. Accumulation is additive.
  std::vector<T>& grad_buffer() {
    if (s_->grad.empty()) s_->grad.assign(s_->values.size(), T(0));
    return s_->grad;
  }

  void zero_grad() { s_->grad.clear(); }

  // Internal: ops and the tape manipulate storage directly.
  const std::shared_ptr<Storage>& storage() const { return s_; }

 private:
  std::shared_ptr<Storage> s_;
};

/// Ordered record of executed operations. Replaying it backward visits each
/// node exactly once in reverse execution order, which is a reverse
/// topological order of the dataflow graph.
template <typename T>
class TapeT {
 public:
  using StoragePtr = std::shared_ptr<detail::TensorStorage<T>>;

  void record(StoragePtr out, std::function<void()> backprop) {
    nodes_.push_back(Node{std::move(out), std::move(backprop)});
  }

  /// Runs reverse-mode accumulation from a scalar loss. Consumes the tape;
  /// a second call without re-executing the forward pass is an error.
  void backward(const TensorT<T>& loss) {
    if (consumed_) throw StateError("backward: tape already consumed; re-run the forward pass");
    if (!loss.defined() || loss.numel() != 1)
      throw DimensionError("backward: loss must be a scalar, got shape " +
                           (loss.defined() ? shape_to_string(loss.shape()) : std::string("<undefined>")));
    auto s = loss.storage();
    if (s->tape_tag != this)
      throw StateError("backward: loss is not attached to this tape (detached graph)");
    s->grad.assign(1, T(1));
    // Nodes whose output never received a gradient are not on a path to the
    // loss and are skipped.
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      if (!it->out->grad.empty()) it->backprop();
    }
    consumed_ = true;
  }

  size_t num_nodes() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }

 private:
  struct Node {
    StoragePtr out;
    std::function<void()> backprop;
  };
  std::vector<Node> nodes_;
  bool consumed_ = false;
};

/// RAII scope making a tape the active recording target for this thread.
/// Ops record onto the active tape; with no scope open they run inference-only.
template <typename T>
class TapeScope {
 public:
  explicit TapeScope(TapeT<T>& tape) : prev_(active_) { active_ = &tape; }
  ~TapeScope() { active_ = prev_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

  static TapeT<T>* active() { return active_; }

 private:
  TapeT<T>* prev_;
  static thread_local TapeT<T>* active_;
};

template <typename T>
thread_local TapeT<T>* TapeScope<T>::active_ = nullptr;

using Tensor = TensorT<float>;
using Tape = TapeT<float>;

namespace detail {

template <typename T>
bool wants_grad(const TensorT<T>& t) {
  auto* tape = TapeScope<T>::active();
  if (!tape || !t.defined()) return false;
  const auto& s = *t.storage();
  return s.requires_grad || (s.tracked && s.tape_tag == tape);
}

template <typename T>
void record_op(TensorT<T>& out, std::function<void()> backprop) {
  auto* tape = TapeScope<T>::active();
  out.storage()->tracked = true;
  out.storage()->tape_tag = tape;
  tape->record(out.storage(), std::move(backprop));
}

template <typename T>
std::vector<T>& grad_acc(const std::shared_ptr<TensorStorage<T>>& s) {
  if (s->grad.empty()) s->grad.assign(s->values.size(), T(0));
  return s->grad;
}

}  // namespace detail
}  // namespace dwstrack
