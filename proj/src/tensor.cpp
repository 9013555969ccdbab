#include "exvt/tensor.hpp"

#include <atomic>
#include <numeric>

namespace exvt {

std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

std::string to_string(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += ", ";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

const char* op_name(OpKind kind) {
  switch (kind) {
    case OpKind::conv2d: return "conv2d";
    case OpKind::linear: return "linear";
    case OpKind::batch_norm: return "batch_norm";
    case OpKind::layer_norm: return "layer_norm";
    case OpKind::silu: return "silu";
    case OpKind::relu: return "relu";
    case OpKind::softmax: return "softmax";
    case OpKind::attention: return "attention";
    case OpKind::unfold: return "unfold";
    case OpKind::fold: return "fold";
    case OpKind::global_avg_pool: return "global_avg_pool";
    case OpKind::concat: return "concat";
    case OpKind::add: return "add";
    case OpKind::mul: return "mul";
    case OpKind::scale: return "scale";
    case OpKind::sum: return "sum";
    case OpKind::cross_entropy: return "cross_entropy";
  }
  return "unknown";
}

namespace {
std::atomic<std::uint64_t> next_tape_id{1};
}

template <class T>
Tape<T>::Tape() : id_(next_tape_id.fetch_add(1)) {}

template <class T>
Tape<T>*& Tape<T>::current_slot() {
  thread_local Tape<T>* slot = nullptr;
  return slot;
}

template <class T>
Tape<T>* Tape<T>::current() {
  return current_slot();
}

template <class T>
bool Tape<T>::wants(std::initializer_list<const TensorStorage<T>*> inputs) const {
  for (const auto* s : inputs) {
    if (s != nullptr && (s->requires_grad || s->tape_id == id_)) return true;
  }
  return false;
}

template <class T>
void Tape<T>::record(OpKind kind, std::vector<StoragePtr> inputs,
                     const StoragePtr& output, std::function<void()> backward) {
  output->tape_id = id_;
  nodes_.push_back(Node{kind, std::move(inputs), output, std::move(backward)});
}

template <class T>
void Tape<T>::backward(const TensorT<T>& loss) {
  if (loss.numel() != 1) {
    throw AutogradError("backward() needs a scalar loss, got shape " +
                        to_string(loss.shape()));
  }
  if (loss.tape_id() != id_) {
    throw AutogradError("backward() on a tensor that is not on this tape");
  }
  auto& seed = loss.storage()->grad;
  seed.assign(1, T{1});
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    if (it->output->grad.empty()) continue;
    it->backward();
  }
}

template <class T>
void Tape<T>::clear() {
  nodes_.clear();
}

template class Tape<float>;
template class Tape<double>;

}  // namespace exvt
