#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <atomic>
#include <cstdint>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "mixres/errors.hpp"

namespace mixres {

using Shape = std::vector<std::size_t>;

inline std::size_t numel_of(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

template <class T>
class Tape;

namespace detail {

template <class T>
struct Storage {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until a gradient is accumulated
  bool requires_grad = false;
  // Id of the tape that recorded this tensor as a node output (0 = none).
  std::uint64_t producer = 0;
};

}  // namespace detail

/// N-dimensional row-major array with an optional gradient slot.
///
/// Copies share storage (like a handle); use clone() for a deep copy.
template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() : s_(std::make_shared<detail::Storage<T>>()) {}

  explicit Tensor(Shape shape, T fill = T(0), bool requires_grad = false)
      : s_(std::make_shared<detail::Storage<T>>()) {
    for (auto d : shape)
      if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + to_string(shape));
    s_->data.assign(numel_of(shape), fill);
    s_->shape = std::move(shape);
    s_->requires_grad = requires_grad;
  }

  Tensor(Shape shape, std::vector<T> values, bool requires_grad = false)
      : s_(std::make_shared<detail::Storage<T>>()) {
    if (numel_of(shape) != values.size())
      throw DimensionError("shape " + to_string(shape) + " needs " + std::to_string(numel_of(shape)) +
                           " values, got " + std::to_string(values.size()));
    s_->shape = std::move(shape);
    s_->data = std::move(values);
    s_->requires_grad = requires_grad;
  }

  static Tensor scalar(T v, bool requires_grad = false) { return Tensor(Shape{1}, std::vector<T>{v}, requires_grad); }

  const Shape& shape() const { return s_->shape; }
  std::size_t dim(std::size_t i) const { return s_->shape.at(i); }
  std::size_t rank() const { return s_->shape.size(); }
  std::size_t numel() const { return s_->data.size(); }
  bool is_scalar() const { return numel() == 1; }

  std::span<T> data() { return s_->data; }
  std::span<const T> data() const { return s_->data; }
  T& operator[](std::size_t i) { return s_->data[i]; }
  const T& operator[](std::size_t i) const { return s_->data[i]; }
  T item() const {
    if (!is_scalar()) throw UsageError("item() on tensor of shape " + to_string(shape()));
    return s_->data[0];
  }

  bool requires_grad() const { return s_->requires_grad; }
  Tensor& set_requires_grad(bool on = true) {
    s_->requires_grad = on;
    return *this;
  }

  bool has_grad() const { return !s_->grad.empty(); }
  /// Gradient buffer, allocated (zero-filled) on first access.
  std::span<T> grad() {
    if (s_->grad.empty()) s_->grad.assign(numel(), T(0));
    return s_->grad;
  }
  std::span<const T> grad() const { return s_->grad; }
  void zero_grad() { std::fill(s_->grad.begin(), s_->grad.end(), T(0)); }
  void clear_grad() { s_->grad.clear(); }

  /// Deep copy of the values; the copy is a fresh leaf.
  Tensor clone() const { return Tensor(shape(), s_->data, requires_grad()); }
  /// Same values, no gradient tracking.
  Tensor detach() const { return Tensor(shape(), s_->data, false); }
  Tensor grad_tensor() const {
    if (!has_grad()) return Tensor(shape(), T(0));
    return Tensor(shape(), s_->grad);
  }

  bool same_storage(const Tensor& o) const { return s_ == o.s_; }

  // Internal: used by ops and the tape.
  const std::shared_ptr<detail::Storage<T>>& storage() const { return s_; }

 private:
  std::shared_ptr<detail::Storage<T>> s_;
};

/// Ordered record of differentiable operations for one forward pass.
///
/// Nodes are appended as ops execute, so the record is already in
/// topological order; backward() replays it in reverse exactly once.
/// A tape is only recorded into while a Tape::Scope for it is alive on the
/// current thread.
template <class T>
class Tape {
 public:
  using StoragePtr = std::shared_ptr<detail::Storage<T>>;

  Tape() : id_(next_id()) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// RAII guard making this tape the recording target for the thread.
  class Scope {
   public:
    explicit Scope(Tape& tape) : prev_(current()) { current() = &tape; }
    ~Scope() { current() = prev_; }
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    Tape* prev_;
  };

  /// Tape currently recording on this thread, or nullptr.
  static Tape* active() { return current(); }

  /// Appends a node. `rule` reads the output gradient and accumulates into
  /// input gradients; it is only invoked when the output has a gradient.
  void record(const StoragePtr& output, std::function<void()> rule) {
    output->producer = id_;
    nodes_.push_back(Node{output, std::move(rule)});
  }

  std::size_t size() const { return nodes_.size(); }

  void clear() { nodes_.clear(); }

  /// Seeds d(loss)/d(loss) = 1 and propagates gradients to every reachable
  /// tensor with requires_grad. Gradients accumulate into existing buffers.
  void backward(Tensor<T>& loss) {
    if (!loss.is_scalar()) throw UsageError("backward() needs a scalar loss, got shape " + to_string(loss.shape()));
    if (loss.storage()->producer != id_) throw UsageError("loss was not produced under this tape");
    loss.grad()[0] += T(1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      if (it->output->grad.empty()) continue;
      it->rule();
    }
  }

 private:
  struct Node {
    StoragePtr output;
    std::function<void()> rule;
  };

  static std::uint64_t next_id() {
    static std::atomic<std::uint64_t> counter{0};
    return ++counter;
  }

  static Tape*& current() {
    thread_local Tape* tape = nullptr;
    return tape;
  }

  std::uint64_t id_;
  std::vector<Node> nodes_;
};

namespace detail {

/// Gradient buffer of `s`, allocated on demand.
template <class T>
std::vector<T>& grad_of(Storage<T>& s) {
  if (s.grad.empty()) s.grad.assign(s.data.size(), T(0));
  return s.grad;
}

/// Returns the active tape when any input needs a gradient, else nullptr.
template <class T>
Tape<T>* recording_tape(std::initializer_list<const Tensor<T>*> inputs) {
  Tape<T>* tape = Tape<T>::active();
  if (!tape) return nullptr;
  for (const auto* t : inputs)
    if (t && t->requires_grad()) return tape;
  return nullptr;
}

/// Test hook: when set to an op name, that op's backward rule scales the
/// gradients it produces by (1 + 1e-2). Used as a negative control for the
/// gradient-check suite.
inline const char*& corrupted_backward_op() {
  thread_local const char* name = nullptr;
  return name;
}

template <class T>
T fault_factor(const char* op) {
  const char* hook = corrupted_backward_op();
  return (hook && std::string_view(hook) == op) ? T(1.01) : T(1);
}

}  // namespace detail

/// Scoped activation of the corrupted-backward hook.
class CorruptBackwardGuard {
 public:
  explicit CorruptBackwardGuard(const char* op) : prev_(detail::corrupted_backward_op()) {
    detail::corrupted_backward_op() = op;
  }
  ~CorruptBackwardGuard() { detail::corrupted_backward_op() = prev_; }
  CorruptBackwardGuard(const CorruptBackwardGuard&) = delete;
  CorruptBackwardGuard& operator=(const CorruptBackwardGuard&) = delete;

 private:
  const char* prev_;
};

}  // namespace mixres
