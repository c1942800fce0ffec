#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "tulip/tensor.hpp"

namespace tulip {

template <typename T>
class Tape;

// Handle to a value recorded on a tape. Cheap to copy; only valid while the
// tape that produced it is alive.
template <typename T>
struct Var {
  Tape<T>* tape = nullptr;
  int id = -1;

  const Tensor<T>& value() const;
  const Shape& shape() const { return value().shape(); }
  bool valid() const { return tape != nullptr && id >= 0; }
};

template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;

  void zero_grad() { grad = Tensor<T>(value.shape()); }
};

// Parameters ordered lexicographically by name; the order is the index order
// used by gradient buffers, optimizers and checkpoints.
template <typename T>
class ParameterSet {
 public:
  Parameter<T>& add(const std::string& name, Tensor<T> value);

  std::size_t size() const { return params_.size(); }
  bool contains(const std::string& name) const { return index_.contains(name); }
  std::size_t index_of(const std::string& name) const;
  Parameter<T>& at(std::size_t i) { return params_[i]; }
  const Parameter<T>& at(std::size_t i) const { return params_[i]; }
  Parameter<T>& operator[](const std::string& name) { return params_[index_of(name)]; }
  const Parameter<T>& operator[](const std::string& name) const { return params_[index_of(name)]; }

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  std::size_t scalar_count() const;
  void zero_grad();

  // Zeroed tensors shaped like each parameter, for per-worker accumulation.
  std::vector<Tensor<T>> make_gradient_buffer() const;

 private:
  void reindex();

  std::vector<Parameter<T>> params_;
  std::map<std::string, std::size_t> index_;
};

// Append-only record of operations. Node ids are positions in recording
// order; every entry refers only to earlier nodes, so reverse recording order
// is a valid topological order for the backward pass.
template <typename T>
class Tape {
 public:
  // Receives the gradient and value of the recorded output and pushes
  // contributions to its inputs through grad_slot()/accumulate().
  using BackwardFn =
      std::function<void(Tape&, const Tensor<T>& grad_out, const Tensor<T>& out)>;

  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool grad_enabled() const { return grad_enabled_; }

  // Leaf without gradient tracking.
  Var<T> constant(Tensor<T> value);
  // Leaf whose gradient is kept on the tape after backward().
  Var<T> input(Tensor<T> value);
  // Leaf that references an external tensor (which must outlive the tape)
  // and adds its gradient into grad_sink on every backward(). A null sink
  // makes it a zero-copy constant.
  Var<T> parameter(const Tensor<T>& value, Tensor<T>* grad_sink);
  Var<T> parameter(Parameter<T>& p) { return parameter(p.value, &p.grad); }

  Var<T> record(Tensor<T> value, std::vector<int> inputs, BackwardFn backward);

  const Tensor<T>& value(int id) const;
  const Tensor<T>& value(Var<T> v) const { return value(v.id); }
  bool requires_grad(int id) const { return nodes_[id].requires_grad; }
  bool requires_grad(Var<T> v) const { return requires_grad(v.id); }

  // Gradient of a leaf after backward(); empty tensor when none flowed.
  const Tensor<T>& grad(Var<T> v) const;

  // Adds g (shape of node id) into the node's gradient, if it tracks one.
  void accumulate(int id, const Tensor<T>& g);
  // Mutable gradient slot, zero-initialised on first use.
  Tensor<T>& grad_slot(int id);

  // Reverse pass from a scalar loss. Parameter sinks accumulate, so calling
  // twice without clearing doubles their gradients.
  void backward(Var<T> loss);

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor<T> owned;
    const Tensor<T>* external = nullptr;
    Tensor<T>* sink = nullptr;
    bool requires_grad = false;
    bool leaf = true;
  };
  struct Entry {
    std::vector<int> inputs;
    int output = -1;
    BackwardFn backward;
  };

  int push_node(Node node);

  bool grad_enabled_;
  std::vector<Node> nodes_;
  std::vector<Entry> entries_;
  std::vector<Tensor<T>> grads_;
};

template <typename T>
const Tensor<T>& Var<T>::value() const {
  return tape->value(id);
}

extern template struct Var<float>;
extern template struct Var<double>;
extern template class ParameterSet<float>;
extern template class ParameterSet<double>;
extern template class Tape<float>;
extern template class Tape<double>;

}  // namespace tulip
