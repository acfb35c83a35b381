#pragma once

#include <functional>
#include <utility>
#include <vector>

#include "dipwm/params.hpp"
#include "dipwm/tensor.hpp"

namespace dipwm {

/// Reverse-mode gradient tape. Every op records its output value together
/// with a closure that pushes the output gradient into its inputs. A tape is
/// single-use: build it with a forward pass, then call `backward` any number
/// of times with different seeds.
template <typename Scalar>
class Tape {
 public:
  using T = Tensor<Scalar>;
  using BackwardFn = std::function<void(Tape&, const T&)>;

  struct Var {
    int id = -1;
  };

  /// Leaf that never receives a gradient.
  Var constant(T value) { return push(std::move(value), false, {}); }

  /// Leaf whose gradient is collected by `backward`.
  Var variable(T value) { return push(std::move(value), true, {}); }

  Var record(T value, bool needs_grad, BackwardFn fn) {
    return push(std::move(value), needs_grad, needs_grad ? std::move(fn) : BackwardFn{});
  }

  const T& value(Var v) const { return nodes_[std::size_t(v.id)].value; }
  const Shape& shape(Var v) const { return value(v).shape; }
  bool needs_grad(Var v) const { return nodes_[std::size_t(v.id)].needs_grad; }

  template <typename... Vars>
  bool any_needs_grad(Vars... vs) const {
    return (needs_grad(vs) || ...);
  }

  /// Gradient buffer for `v`, zero-initialised on first touch.
  T& grad_ref(Var v) {
    auto& node = nodes_[std::size_t(v.id)];
    if (node.grad.empty()) node.grad = T(node.value.shape);
    return node.grad;
  }

  /// Gradient from the last sweep; zeros if nothing reached `v`.
  T grad(Var v) const {
    const auto& node = nodes_[std::size_t(v.id)];
    return node.grad.empty() ? T(node.value.shape) : node.grad;
  }

  void backward(Var out, const T& seed) {
    if (seed.shape != value(out).shape) {
      throw ConfigError("backward seed shape " + to_string(seed.shape) + " != output " +
                        to_string(value(out).shape));
    }
    for (auto& node : nodes_) node.grad = T();
    nodes_[std::size_t(out.id)].grad = seed;
    for (int id = out.id; id >= 0; --id) {
      auto& node = nodes_[std::size_t(id)];
      if (node.fn && !node.grad.empty()) node.fn(*this, node.grad);
    }
  }

  /// Seeds every output element with one, i.e. differentiates the sum.
  void backward(Var out) { backward(out, T::constant(value(out).shape, Scalar(1))); }

  std::size_t node_count() const noexcept { return nodes_.size(); }

 private:
  struct Node {
    T value;
    T grad;
    bool needs_grad = false;
    BackwardFn fn;
  };

  Var push(T value, bool needs_grad, BackwardFn fn) {
    nodes_.push_back(Node{std::move(value), T(), needs_grad, std::move(fn)});
    return Var{int(nodes_.size()) - 1};
  }

  std::vector<Node> nodes_;
};

/// A ParamSet placed on a tape, addressable by parameter name.
template <typename Scalar>
class Bound {
 public:
  using Var = typename Tape<Scalar>::Var;

  Bound(Tape<Scalar>& tape, const ParamSet<Scalar>& params, bool track)
      : params_(&params) {
    vars_.reserve(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      vars_.push_back(track ? tape.variable(params[i]) : tape.constant(params[i]));
    }
  }

  Var operator[](const std::string& name) const { return vars_[params_->index_of(name)]; }
  bool has(const std::string& name) const { return params_->contains(name); }

  /// Gradients of the last sweep, laid out like the bound ParamSet.
  ParamSet<Scalar> gradients(const Tape<Scalar>& tape) const {
    ParamSet<Scalar> out;
    for (std::size_t i = 0; i < vars_.size(); ++i) out.add(params_->name(i), tape.grad(vars_[i]));
    return out;
  }

 private:
  const ParamSet<Scalar>* params_;
  std::vector<Var> vars_;
};

}  // namespace dipwm
