#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace exvt {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class AutogradError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

template <class T>
struct TensorStorage {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until a gradient is accumulated
  bool requires_grad = false;
  std::uint64_t tape_id = 0;  // nonzero when produced by a recorded op
};

// Dense row-major tensor handle. Copies share storage; use clone() for a
// deep copy.
template <class T>
class TensorT {
 public:
  using value_type = T;

  TensorT() : TensorT(Shape{0}) {}

  explicit TensorT(Shape shape, T fill = T{0})
      : impl_(std::make_shared<TensorStorage<T>>()) {
    impl_->data.assign(exvt::numel(shape), fill);
    impl_->shape = std::move(shape);
  }

  TensorT(Shape shape, std::vector<T> values)
      : impl_(std::make_shared<TensorStorage<T>>()) {
    if (exvt::numel(shape) != values.size()) {
      throw ShapeError("tensor of shape " + to_string(shape) + " needs " +
                       std::to_string(exvt::numel(shape)) + " values, got " +
                       std::to_string(values.size()));
    }
    impl_->shape = std::move(shape);
    impl_->data = std::move(values);
  }

  static TensorT scalar(T value) { return TensorT(Shape{}, std::vector<T>{value}); }

  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return impl_->shape.at(axis); }
  std::size_t numel() const { return impl_->data.size(); }

  std::span<T> data() { return impl_->data; }
  std::span<const T> data() const { return impl_->data; }

  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<T> grad() { return impl_->grad; }
  std::span<const T> grad() const { return impl_->grad; }

  // Zeroes an allocated gradient buffer (no-op when none exists).
  void zero_grad() {
    std::fill(impl_->grad.begin(), impl_->grad.end(), T{0});
  }
  void drop_grad() { impl_->grad.clear(); }

  bool requires_grad() const { return impl_->requires_grad; }
  TensorT& set_requires_grad(bool on) {
    impl_->requires_grad = on;
    return *this;
  }

  bool on_tape() const { return impl_->tape_id != 0; }
  std::uint64_t tape_id() const { return impl_->tape_id; }

  T item() const {
    if (numel() != 1) {
      throw ShapeError("item() on tensor of shape " + to_string(shape()));
    }
    return impl_->data[0];
  }

  T& operator[](std::size_t i) { return impl_->data[i]; }
  const T& operator[](std::size_t i) const { return impl_->data[i]; }

  TensorT clone() const {
    TensorT out(impl_->shape, impl_->data);
    out.impl_->requires_grad = impl_->requires_grad;
    return out;
  }

  // Copy of the data under a new shape, detached from any tape.
  TensorT reshaped(Shape shape) const {
    if (exvt::numel(shape) != numel()) {
      throw ShapeError("cannot reshape " + to_string(this->shape()) + " to " +
                       to_string(shape));
    }
    return TensorT(std::move(shape), impl_->data);
  }

  bool same_storage(const TensorT& other) const { return impl_ == other.impl_; }
  const std::shared_ptr<TensorStorage<T>>& storage() const { return impl_; }

  static TensorT wrap(std::shared_ptr<TensorStorage<T>> storage) {
    TensorT t;
    t.impl_ = std::move(storage);
    return t;
  }

 private:
  std::shared_ptr<TensorStorage<T>> impl_;
};

using Tensor = TensorT<float>;

enum class OpKind {
  conv2d,
  linear,
  batch_norm,
  layer_norm,
  silu,
  relu,
  softmax,
  attention,
  unfold,
  fold,
  global_avg_pool,
  concat,
  add,
  mul,
  scale,
  sum,
  cross_entropy,
};

const char* op_name(OpKind kind);

// Reverse-mode tape. Nodes are appended in execution order, so the node list
// is already a topological order; backward() walks it in reverse.
template <class T>
class Tape {
 public:
  using StoragePtr = std::shared_ptr<TensorStorage<T>>;

  struct Node {
    OpKind kind;
    std::vector<StoragePtr> inputs;
    StoragePtr output;
    std::function<void()> backward;
  };

  Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // The tape ops record onto in this thread, or nullptr.
  static Tape* current();

  std::uint64_t id() const { return id_; }
  std::size_t size() const { return nodes_.size(); }
  const Node& node(std::size_t i) const { return nodes_.at(i); }

  // True when an op over these inputs must be recorded.
  bool wants(std::initializer_list<const TensorStorage<T>*> inputs) const;

  void record(OpKind kind, std::vector<StoragePtr> inputs, const StoragePtr& output,
              std::function<void()> backward);

  // Seeds d(loss)/d(loss) = 1 and runs every node's backward in reverse
  // recording order.
  void backward(const TensorT<T>& loss);

  void clear();

 private:
  std::uint64_t id_;
  std::vector<Node> nodes_;
  template <class>
  friend class TapeScope;
  static Tape*& current_slot();
};

// Makes `tape` the recording tape for this thread for the scope's lifetime.
template <class T>
class TapeScope {
 public:
  explicit TapeScope(Tape<T>& tape) : previous_(Tape<T>::current_slot()) {
    Tape<T>::current_slot() = &tape;
  }
  ~TapeScope() { Tape<T>::current_slot() = previous_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape<T>* previous_;
};

// Runs backward on the thread's current tape.
template <class T>
void backward(const TensorT<T>& loss) {
  Tape<T>* tape = Tape<T>::current();
  if (tape == nullptr) {
    throw AutogradError("backward() called with no active tape");
  }
  tape->backward(loss);
}

// Gradient slot for an op input during backward, allocated on first use.
// Returns an empty span for inputs that do not take gradients.
template <class T>
std::span<T> grad_slot(const std::shared_ptr<TensorStorage<T>>& s) {
  if (!s->requires_grad && s->tape_id == 0) return {};
  if (s->grad.empty()) s->grad.assign(s->data.size(), T{0});
  return s->grad;
}

}  // namespace exvt
