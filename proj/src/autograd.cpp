#include "tulip/autograd.hpp"

#include <algorithm>

#include "tulip/error.hpp"

namespace tulip {

template <typename T>
Parameter<T>& ParameterSet<T>::add(const std::string& name, Tensor<T> value) {
  require(!contains(name), Errc::kInvalidArgument, "duplicate parameter name: " + name);
  Parameter<T> p;
  p.name = name;
  p.grad = Tensor<T>(value.shape());
  p.value = std::move(value);
  const auto pos = std::lower_bound(params_.begin(), params_.end(), name,
                                    [](const Parameter<T>& a, const std::string& n) {
                                      return a.name < n;
                                    });
  const auto inserted = params_.insert(pos, std::move(p));
  reindex();
  return *inserted;
}

template <typename T>
std::size_t ParameterSet<T>::index_of(const std::string& name) const {
  const auto it = index_.find(name);
  require(it != index_.end(), Errc::kInvalidArgument, "unknown parameter: " + name);
  return it->second;
}

template <typename T>
std::size_t ParameterSet<T>::scalar_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

template <typename T>
void ParameterSet<T>::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

template <typename T>
std::vector<Tensor<T>> ParameterSet<T>::make_gradient_buffer() const {
  std::vector<Tensor<T>> buf;
  buf.reserve(params_.size());
  for (const auto& p : params_) buf.emplace_back(p.value.shape());
  return buf;
}

template <typename T>
void ParameterSet<T>::reindex() {
  index_.clear();
  for (std::size_t i = 0; i < params_.size(); ++i) index_[params_[i].name] = i;
}

template <typename T>
int Tape<T>::push_node(Node node) {
  nodes_.push_back(std::move(node));
  return static_cast<int>(nodes_.size()) - 1;
}

template <typename T>
Var<T> Tape<T>::constant(Tensor<T> value) {
  Node n;
  n.owned = std::move(value);
  return {this, push_node(std::move(n))};
}

template <typename T>
Var<T> Tape<T>::input(Tensor<T> value) {
  Node n;
  n.owned = std::move(value);
  n.requires_grad = grad_enabled_;
  return {this, push_node(std::move(n))};
}

template <typename T>
Var<T> Tape<T>::parameter(const Tensor<T>& value, Tensor<T>* grad_sink) {
  Node n;
  n.external = &value;
  n.sink = grad_sink;
  n.requires_grad = grad_enabled_ && grad_sink != nullptr;
  return {this, push_node(std::move(n))};
}

template <typename T>
Var<T> Tape<T>::record(Tensor<T> value, std::vector<int> inputs, BackwardFn backward) {
  bool needs = false;
  if (grad_enabled_) {
    for (int id : inputs) needs = needs || nodes_[id].requires_grad;
  }
  Node n;
  n.owned = std::move(value);
  n.requires_grad = needs;
  n.leaf = false;
  const int id = push_node(std::move(n));
  if (needs) entries_.push_back({std::move(inputs), id, std::move(backward)});
  return {this, id};
}

template <typename T>
const Tensor<T>& Tape<T>::value(int id) const {
  const Node& n = nodes_[id];
  return n.external != nullptr ? *n.external : n.owned;
}

template <typename T>
const Tensor<T>& Tape<T>::grad(Var<T> v) const {
  static const Tensor<T> kEmpty;
  if (v.id < 0 || static_cast<std::size_t>(v.id) >= grads_.size()) return kEmpty;
  return grads_[v.id];
}

template <typename T>
Tensor<T>& Tape<T>::grad_slot(int id) {
  Tensor<T>& slot = grads_[id];
  if (slot.empty() && numel(value(id).shape()) > 0) slot = Tensor<T>(value(id).shape());
  return slot;
}

template <typename T>
void Tape<T>::accumulate(int id, const Tensor<T>& g) {
  if (!nodes_[id].requires_grad) return;
  Tensor<T>& slot = grad_slot(id);
  require(slot.size() == g.size(), Errc::kShapeMismatch, "gradient shape mismatch in backward");
  T* dst = slot.ptr();
  const T* src = g.ptr();
  for (std::size_t i = 0; i < g.size(); ++i) dst[i] += src[i];
}

template <typename T>
void Tape<T>::backward(Var<T> loss) {
  require(loss.tape == this, Errc::kShapeMismatch, "loss belongs to another tape");
  require(value(loss.id).size() == 1, Errc::kNonScalarLoss,
          "backward() needs a scalar loss, got shape " + to_string(value(loss.id).shape()));
  grads_.assign(nodes_.size(), Tensor<T>());
  if (!nodes_[loss.id].requires_grad) return;
  grads_[loss.id] = Tensor<T>(value(loss.id).shape(), T(1));
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
    if (it->output > loss.id) continue;
    Tensor<T>& g = grads_[it->output];
    if (g.empty()) continue;
    it->backward(*this, g, value(it->output));
    g = Tensor<T>();
  }
  for (std::size_t id = 0; id < nodes_.size(); ++id) {
    Node& n = nodes_[id];
    if (n.sink == nullptr || grads_[id].empty()) continue;
    Tensor<T>& sink = *n.sink;
    if (sink.size() != grads_[id].size()) sink = Tensor<T>(value(static_cast<int>(id)).shape());
    T* dst = sink.ptr();
    const T* src = grads_[id].ptr();
    for (std::size_t i = 0; i < sink.size(); ++i) dst[i] += src[i];
  }
}

template struct Var<float>;
template struct Var<double>;
template class ParameterSet<float>;
template class ParameterSet<double>;
template class Tape<float>;
template class Tape<double>;

}  // namespace tulip
