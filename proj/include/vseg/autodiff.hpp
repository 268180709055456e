#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <initializer_list>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "vseg/error.hpp"
#include "vseg/tensor.hpp"

namespace vseg {

/// A named model tensor. Buffers (batch-norm running statistics) are stored
/// alongside weights but are not trainable.
template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
  bool trainable = true;
};

template <typename T>
class ParameterSet {
 public:
  Parameter<T>& add(std::string name, Tensor<T> value, bool trainable = true) {
    if (find(name)) throw ConfigError("duplicate parameter name: " + name);
    Tensor<T> grad(value.shape());
    items_.push_back({std::move(name), std::move(value), std::move(grad), trainable});
    return items_.back();
  }

  Parameter<T>* find(std::string_view name) {
    for (auto& p : items_)
      if (p.name == name) return &p;
    return nullptr;
  }
  const Parameter<T>* find(std::string_view name) const {
    for (const auto& p : items_)
      if (p.name == name) return &p;
    return nullptr;
  }
  Parameter<T>& get(std::string_view name) {
    if (auto* p = find(name)) return *p;
    throw ConfigError("unknown parameter: " + std::string(name));
  }
  const Parameter<T>& get(std::string_view name) const {
    if (const auto* p = find(name)) return *p;
    throw ConfigError("unknown parameter: " + std::string(name));
  }

  std::size_t size() const noexcept { return items_.size(); }
  Parameter<T>& operator[](std::size_t i) { return items_[i]; }
  const Parameter<T>& operator[](std::size_t i) const { return items_[i]; }
  auto begin() { return items_.begin(); }
  auto end() { return items_.end(); }
  auto begin() const { return items_.begin(); }
  auto end() const { return items_.end(); }

  void zero_grad() {
    for (auto& p : items_) p.grad.fill(T(0));
  }

  // Number of trainable scalars.
  std::size_t trainable_count() const {
    std::size_t n = 0;
    for (const auto& p : items_)
      if (p.trainable) n += p.value.size();
    return n;
  }

  template <typename U>
  ParameterSet<U> cast() const {
    ParameterSet<U> out;
    for (const auto& p : items_) out.add(p.name, p.value.template cast<U>(), p.trainable);
    return out;
  }

 private:
  std::deque<Parameter<T>> items_;  // stable references across add()
};

/// Handle to a node on a Tape.
struct Var {
  std::size_t id = static_cast<std::size_t>(-1);
};

/// Reverse-mode tape. Every op appends a node holding its value and a closure
/// that pushes the node's gradient to its parents. Single writer.
template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  /// With `track_gradients` false nothing requires a gradient and no closures are kept.
  explicit Tape(bool track_gradients = true) : track_(track_gradients) {}

  bool tracking() const noexcept { return track_; }

  Var constant(Tensor<T> value) { return push(std::move(value), false, nullptr, {}); }

  Var input(Tensor<T> value, bool requires_grad = true) {
    return push(std::move(value), track_ && requires_grad, nullptr, {});
  }

  /// The parameter's value is referenced, not copied; it must outlive the tape
  /// and stay unchanged until backward() returns.
  Var parameter(Parameter<T>& p) {
    const Var v = push(Tensor<T>(), track_ && p.trainable, &p, {});
    nodes_[v.id].external = &p.value;
    return v;
  }

  /// Append the result of an op. The closure only runs if some parent needs a gradient.
  Var record(Tensor<T> value, std::initializer_list<Var> parents, BackwardFn fn) {
    return record(std::move(value), std::vector<Var>(parents), std::move(fn));
  }
  Var record(Tensor<T> value, const std::vector<Var>& parents, BackwardFn fn) {
    bool needs = false;
    for (Var p : parents) needs = needs || node(p).requires_grad;
    return push(std::move(value), needs, nullptr, needs ? std::move(fn) : BackwardFn{});
  }

  const Tensor<T>& value(Var v) const {
    const auto& n = node(v);
    return n.external ? *n.external : n.value;
  }
  bool requires_grad(Var v) const { return node(v).requires_grad; }
  std::size_t size() const noexcept { return nodes_.size(); }
  bool contains(Var v) const noexcept { return v.id < nodes_.size(); }

  /// Gradient of the last backward() with respect to v; zeros if v was unreached.
  const Tensor<T>& grad(Var v) {
    auto& n = node(v);
    if (n.grad.empty()) n.grad = Tensor<T>(value(v).shape());
    return n.grad;
  }

  // Used by op closures: the node's own upstream gradient.
  const Tensor<T>& upstream(std::size_t self) const { return nodes_[self].grad; }

  // Used by op closures: zero-initialised accumulator for a parent, or null when
  // the parent does not need a gradient.
  Tensor<T>* accumulator(Var v) {
    auto& n = node(v);
    if (!n.requires_grad) return nullptr;
    if (n.grad.empty()) n.grad = Tensor<T>(value(v).shape());
    return &n.grad;
  }

  void backward(Var out, const Tensor<T>& seed) {
    if (!contains(out)) throw Error("backward: variable is not on this tape");
    auto& root = nodes_[out.id];
    if (seed.shape() != value(out).shape())
      throw ShapeError("backward: upstream gradient " + shape_string(seed.shape()) +
                       " does not match output " + shape_string(value(out).shape()));
    for (auto& n : nodes_) n.grad = Tensor<T>();
    if (!root.requires_grad) return;
    root.grad = seed;
    for (std::size_t i = out.id + 1; i-- > 0;) {
      auto& n = nodes_[i];
      if (n.grad.empty()) continue;
      if (n.param) {
        n.param->grad += n.grad;
      } else if (n.fn) {
        n.fn(*this, i);
      }
    }
  }

  /// Seeds a scalar output with 1.
  void backward(Var scalar_out) {
    if (!contains(scalar_out)) throw Error("backward: variable is not on this tape");
    Tensor<T> seed(value(scalar_out).shape(), T(1));
    backward(scalar_out, seed);
  }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    Parameter<T>* param = nullptr;
    BackwardFn fn;
    const Tensor<T>* external = nullptr;
  };

  Var push(Tensor<T> value, bool requires_grad, Parameter<T>* param, BackwardFn fn) {
    nodes_.push_back({std::move(value), Tensor<T>(), requires_grad, param, std::move(fn), nullptr});
    return Var{nodes_.size() - 1};
  }

  Node& node(Var v) {
    if (!contains(v)) throw Error("variable is not on this tape");
    return nodes_[v.id];
  }
  const Node& node(Var v) const {
    if (!contains(v)) throw Error("variable is not on this tape");
    return nodes_[v.id];
  }

  bool track_ = true;
  std::vector<Node> nodes_;
};

}  // namespace vseg
