#pragma once

// Minimal reverse-mode differentiation over Tensor values.
//
// A Tape records one forward computation. Every op in ops.hpp appends a node
// holding its output value and a closure that scatters the output gradient
// into its inputs. Nodes are created in topological order, so backward() is a
// single reverse sweep. Parameters are referenced, not copied; their gradients
// go to an optional GradientStore shared across tapes, which lets a trainer
// run one tape per study and accumulate into one set of sums.

#include <deque>
#include <functional>
#include <initializer_list>
#include <string>
#include <unordered_map>
#include <vector>

#include "ctsl/tensor.hpp"

namespace ctsl {

struct Parameter {
  std::string name;
  Tensor value;
};

using ParameterList = std::vector<Parameter*>;

class GradientStore {
 public:
  Tensor& slot(const Parameter& p);
  const Tensor* find(const Parameter& p) const;
  void clear() { grads_.clear(); }
  void scale(double s);
  // Returns the gradient for p, or zeros when nothing flowed into it.
  Tensor get(const Parameter& p) const;

 private:
  std::unordered_map<const Parameter*, Tensor> grads_;
};

class Tape;

class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t dim(std::size_t axis) const { return value().dim(axis); }
  Tape& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  using Backward = std::function<void(const Tensor& out_grad)>;

  explicit Tape(GradientStore* sink = nullptr, bool grad_enabled = true)
      : sink_(sink), grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool grad_enabled() const { return grad_enabled_; }

  Var constant(Tensor value);
  // A differentiable input whose gradient is read back with grad().
  Var leaf(Tensor value);
  Var param(const Parameter& p);

  // Appends an op node. `backward` runs only if some input requires a
  // gradient and the node itself received one.
  Var record(Tensor value, std::initializer_list<Var> inputs, Backward backward);
  Var record(Tensor value, const std::vector<Var>& inputs, Backward backward);

  const Tensor& value(Var v) const;
  bool requires_grad(Var v) const { return nodes_[v.id_].requires_grad; }
  // Gradient accumulator for v, zero-initialised on first use.
  Tensor& grad_buffer(Var v);
  // Gradient accumulated so far, or nullptr.
  const Tensor* grad(Var v) const;

  // Seeds root with `seed` (or 1 for a scalar root) and runs the reverse sweep.
  void backward(Var root, const Tensor* seed = nullptr);

 private:
  struct Node {
    Tensor owned;
    const Tensor* ref = nullptr;
    bool requires_grad = false;
    Tensor grad;
    Tensor* external_grad = nullptr;
    Backward backward;
  };

  Var push(Node node);

  std::deque<Node> nodes_;
  std::unordered_map<const Parameter*, std::size_t> param_nodes_;
  GradientStore* sink_;
  bool grad_enabled_;
};

inline const Tensor& Var::value() const { return tape_->value(*this); }

}  // namespace ctsl
