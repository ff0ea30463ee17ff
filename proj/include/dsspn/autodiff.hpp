#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "dsspn/tensor.hpp"

namespace dsspn {

using ParamId = std::size_t;

template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
};

// Named, ordered collection of trainable tensors. Ids are insertion indices.
template <typename T>
class ParamStore {
 public:
  ParamId add(std::string name, Tensor<T> value) {
    if (index_.count(name)) throw ValidationError("duplicate parameter name: " + name);
    const ParamId id = params_.size();
    index_.emplace(name, id);
    params_.push_back({std::move(name), std::move(value)});
    return id;
  }

  std::size_t size() const { return params_.size(); }
  Parameter<T>& operator[](ParamId id) { return params_.at(id); }
  const Parameter<T>& operator[](ParamId id) const { return params_.at(id); }

  std::optional<ParamId> find(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  std::size_t total_elements() const {
    std::size_t total = 0;
    for (const auto& p : params_) total += p.value.size();
    return total;
  }

  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

 private:
  std::vector<Parameter<T>> params_;
  std::unordered_map<std::string, ParamId> index_;
};

template <typename T>
class Tape;

// Handle to a value recorded on a Tape.
template <typename T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, std::size_t id) : tape_{tape}, id_{id} {}

  bool valid() const { return tape_ != nullptr; }
  std::size_t id() const { return id_; }
  Tape<T>& tape() const { return *tape_; }
  const Tensor<T>& value() const { return tape_->value(id_); }
  const Shape& shape() const { return value().shape(); }

 private:
  Tape<T>* tape_{nullptr};
  std::size_t id_{0};
};

// Reverse-mode tape. Nodes are appended in execution order; backward walks
// them in exact reverse order. A tape is single-use: backward() consumes it.
template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Tensor<T>& grad_out)>;

  Tape() = default;
  // With gradients disabled nothing is differentiable and no backward
  // closures are kept (inference).
  explicit Tape(bool grad_enabled) : grad_enabled_{grad_enabled} {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> constant(Tensor<T> value) { return push(std::move(value), false, nullptr, std::nullopt); }

  // Differentiable leaf that is not a parameter (used by gradient checks).
  Var<T> leaf(Tensor<T> value) { return push(std::move(value), grad_enabled_, nullptr, std::nullopt); }

  // Parameters are recorded once per tape; repeated requests share the node.
  // Parameters are memoised by id, so one tape serves one store.
  Var<T> parameter(const ParamStore<T>& store, ParamId pid) {
    if (store_ && store_ != &store) throw std::logic_error("tape already holds parameters from another store");
    store_ = &store;
    if (auto it = param_nodes_.find(pid); it != param_nodes_.end()) return {this, it->second};
    Var<T> v = push(store[pid].value, grad_enabled_, nullptr, pid);
    param_nodes_.emplace(pid, v.id());
    return v;
  }

  Var<T> record(Tensor<T> value, std::initializer_list<Var<T>> inputs, BackwardFn fn) {
    bool needs = false;
    for (const auto& in : inputs) needs = needs || nodes_.at(in.id()).requires_grad;
    return push(std::move(value), needs, needs ? std::move(fn) : nullptr, std::nullopt);
  }

  Var<T> record(Tensor<T> value, const std::vector<Var<T>>& inputs, BackwardFn fn) {
    bool needs = false;
    for (const auto& in : inputs) needs = needs || nodes_.at(in.id()).requires_grad;
    return push(std::move(value), needs, needs ? std::move(fn) : nullptr, std::nullopt);
  }

  const Tensor<T>& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  std::size_t size() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }

  // Gradient accumulator for node `id`, created as zeros on first use.
  Tensor<T>& grad_buffer(std::size_t id) {
    Node& node = nodes_.at(id);
    if (node.grad.empty()) node.grad = Tensor<T>(node.value.shape());
    return node.grad;
  }

  // Gradient of a leaf after backward(); nullptr when nothing flowed into it.
  const Tensor<T>* grad(const Var<T>& v) const {
    const Node& node = nodes_.at(v.id());
    return node.grad.empty() ? nullptr : &node.grad;
  }

  std::map<ParamId, Tensor<T>> backward(const Var<T>& loss) {
    if (consumed_) throw Error("backward called twice on a consumed tape");
    if (loss.shape().size() != 1) throw ShapeError("backward expects a scalar loss, got " + loss.shape().str());
    consumed_ = true;
    grad_buffer(loss.id()).fill(T{1});
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      Node& node = nodes_[i];
      if (!node.backward || node.grad.empty()) continue;
      node.backward(*this, node.grad);
      // Intermediate gradients are no longer needed once propagated.
      if (!node.param) node.grad = Tensor<T>();
    }
    std::map<ParamId, Tensor<T>> grads;
    for (const auto& [pid, nid] : param_nodes_) {
      if (!nodes_[nid].grad.empty()) grads.emplace(pid, nodes_[nid].grad);
    }
    return grads;
  }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad{false};
    BackwardFn backward;
    std::optional<ParamId> param;
  };

  Var<T> push(Tensor<T> value, bool requires_grad, BackwardFn fn, std::optional<ParamId> pid) {
    if (consumed_) throw Error("cannot record on a consumed tape");
    nodes_.push_back(Node{std::move(value), Tensor<T>(), requires_grad, std::move(fn), pid});
    return {this, nodes_.size() - 1};
  }

  std::deque<Node> nodes_;  // stable references across appends
  std::map<ParamId, std::size_t> param_nodes_;
  const ParamStore<T>* store_{nullptr};
  bool consumed_{false};
  bool grad_enabled_{true};
};

}  // namespace dsspn
