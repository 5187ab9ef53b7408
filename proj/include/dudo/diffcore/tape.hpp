// SPDX-License-Identifier: Apache-2.0
//
// Define-by-run reverse-mode differentiation.
//
// A Tape records every operation of one forward pass together with its
// backward rule. Learnable tensors live in a ParamStore; the tape refers to
// them by pointer and accumulates their gradients into the store's parallel
// gradient tensors. Gradients are never cleared implicitly.

#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <initializer_list>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "dudo/diffcore/tensor.hpp"

namespace dudo {

/// Named, insertion-ordered learnable tensors with a parallel gradient set.
template <class T>
class ParamStore {
 public:
  Tensor<T>& add(const std::string& name, Tensor<T> init) {
    if (index_.count(name)) throw ShapeError("duplicate parameter name '" + name + "'");
    index_.emplace(name, names_.size());
    names_.push_back(name);
    grads_.emplace_back(init.shape());
    values_.push_back(std::move(init));
    return values_.back();
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  Tensor<T>& value(const std::string& name) { return values_[lookup(name)]; }
  const Tensor<T>& value(const std::string& name) const { return values_[lookup(name)]; }
  Tensor<T>& grad(const std::string& name) { return grads_[lookup(name)]; }
  const Tensor<T>& grad(const std::string& name) const { return grads_[lookup(name)]; }

  Tensor<T>& value_at(std::size_t i) { return values_[i]; }
  const Tensor<T>& value_at(std::size_t i) const { return values_[i]; }
  Tensor<T>& grad_at(std::size_t i) { return grads_[i]; }
  const Tensor<T>& grad_at(std::size_t i) const { return grads_[i]; }

  const std::vector<std::string>& names() const { return names_; }
  std::size_t size() const { return names_.size(); }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& v : values_) n += v.size();
    return n;
  }

  void zero_grad() {
    for (auto& g : grads_) g.fill(T{0});
  }

  template <class U>
  ParamStore<U> cast() const {
    ParamStore<U> out;
    for (std::size_t i = 0; i < names_.size(); ++i) out.add(names_[i], values_[i].template cast<U>());
    return out;
  }

  friend bool operator==(const ParamStore& a, const ParamStore& b) {
    return a.names_ == b.names_ && a.values_ == b.values_;
  }

 private:
  std::size_t lookup(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ShapeError("unknown parameter '" + name + "'");
    return it->second;
  }

  std::vector<std::string> names_;
  std::unordered_map<std::string, std::size_t> index_;
  // deque keeps references stable while a tape points into the store
  std::deque<Tensor<T>> values_;
  std::deque<Tensor<T>> grads_;
};

template <class T>
class Tape;

/// Handle to a node on a tape.
template <class T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Tensor<T>& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t dim(std::size_t i) const { return value().dim(i); }
  std::size_t id() const { return id_; }
  Tape<T>& tape() const { return *tape_; }
  bool requires_grad() const;
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
};

template <class T>
class Tape {
 public:
  using Backward = std::function<void(Tape&, const Tensor<T>& grad, const Tensor<T>& out)>;

  explicit Tape(bool record = true) : record_(record) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return record_; }
  std::size_t size() const { return nodes_.size(); }

  Var<T> constant(Tensor<T> value) {
    check_finite(value, "constant");
    nodes_.push_back(Node{std::move(value), nullptr, std::nullopt, {}, false});
    return Var<T>(this, nodes_.size() - 1);
  }

  /// A differentiable input whose gradient stays on the tape (see grad()).
  Var<T> leaf(Tensor<T> value) {
    check_finite(value, "leaf");
    nodes_.push_back(Node{std::move(value), nullptr, std::nullopt, {}, record_});
    return Var<T>(this, nodes_.size() - 1);
  }

  /// Binds a stored parameter. Repeated lookups within one tape return the same node.
  Var<T> param(ParamStore<T>& store, const std::string& name) {
    auto key = std::make_pair(static_cast<const void*>(&store), name);
    if (auto it = param_nodes_.find(key); it != param_nodes_.end()) return Var<T>(this, it->second);
    const Tensor<T>& value = store.value(name);
    Backward fn;
    if (record_) {
      Tensor<T>* g = &store.grad(name);
      fn = [g](Tape&, const Tensor<T>& gout, const Tensor<T>&) {
        auto dst = g->data();
        auto src = gout.data();
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
      };
    }
    nodes_.push_back(Node{Tensor<T>(), &value, std::nullopt, std::move(fn), record_});
    param_nodes_.emplace(std::move(key), nodes_.size() - 1);
    return Var<T>(this, nodes_.size() - 1);
  }

  /// Records an operation result. `fn` is kept only when some input needs a gradient.
  Var<T> push(Tensor<T> value, std::initializer_list<Var<T>> inputs, Backward fn, const char* op) {
    check_finite(value, op);
    bool needs = false;
    for (const auto& v : inputs) {
      check_owner(v, op);
      needs = needs || nodes_[v.id()].requires_grad;
    }
    needs = needs && record_;
    nodes_.push_back(Node{std::move(value), nullptr, std::nullopt, needs ? std::move(fn) : Backward{}, needs});
    return Var<T>(this, nodes_.size() - 1);
  }

  Var<T> push(Tensor<T> value, const std::vector<Var<T>>& inputs, Backward fn, const char* op) {
    check_finite(value, op);
    bool needs = false;
    for (const auto& v : inputs) {
      check_owner(v, op);
      needs = needs || nodes_[v.id()].requires_grad;
    }
    needs = needs && record_;
    nodes_.push_back(Node{std::move(value), nullptr, std::nullopt, needs ? std::move(fn) : Backward{}, needs});
    return Var<T>(this, nodes_.size() - 1);
  }

  const Tensor<T>& value(std::size_t id) const {
    const Node& n = nodes_.at(id);
    return n.external ? *n.external : n.value;
  }

  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }

  /// Gradient accumulator for a node, allocated as zeros on first use.
  Tensor<T>& grad_buffer(std::size_t id) {
    Node& n = nodes_.at(id);
    if (!n.grad) n.grad.emplace(value(id).shape());
    return *n.grad;
  }

  /// Gradient of the last backward() target with respect to `v`, if any reached it.
  const Tensor<T>* grad(Var<T> v) const {
    const Node& n = nodes_.at(v.id());
    return n.grad ? &*n.grad : nullptr;
  }

  /// Reverse sweep from a scalar. Parameter gradients accumulate into their store.
  void backward(Var<T> loss) {
    if (nodes_.empty()) throw ShapeError("backward on an empty tape");
    check_owner(loss, "backward");
    if (value(loss.id()).size() != 1) {
      throw ShapeError("backward needs a scalar loss, got shape " + shape_str(value(loss.id()).shape()));
    }
    for (auto& n : nodes_) n.grad.reset();
    grad_buffer(loss.id())[0] = T{1};
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.grad || !n.backward) continue;
      n.backward(*this, *n.grad, value(i));
    }
  }

 private:
  struct Node {
    Tensor<T> value;
    const Tensor<T>* external;
    std::optional<Tensor<T>> grad;
    Backward backward;
    bool requires_grad;
  };

  void check_owner(const Var<T>& v, const char* op) const {
    if (&v.tape() != this || v.id() >= nodes_.size()) {
      throw ShapeError(std::string(op) + ": variable belongs to a different tape");
    }
  }

  static void check_finite(const Tensor<T>& t, const char* op) {
    if (!t.all_finite()) throw NumericError(std::string(op) + " produced non-finite values");
  }

  bool record_;
  std::deque<Node> nodes_;
  std::map<std::pair<const void*, std::string>, std::size_t> param_nodes_;
};

template <class T>
const Tensor<T>& Var<T>::value() const {
  return tape_->value(id_);
}

template <class T>
bool Var<T>::requires_grad() const {
  return tape_->requires_grad(id_);
}

template <class T>
void backward(Var<T> loss) {
  loss.tape().backward(loss);
}

}  // namespace dudo
