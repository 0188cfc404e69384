#include "ctsl/autograd.hpp"

#include <stdexcept>

namespace ctsl {

Tensor& GradientStore::slot(const Parameter& p) {
  auto it = grads_.find(&p);
  if (it == grads_.end()) it = grads_.emplace(&p, Tensor(p.value.shape())).first;
  return it->second;
}

const Tensor* GradientStore::find(const Parameter& p) const {
  auto it = grads_.find(&p);
  return it == grads_.end() ? nullptr : &it->second;
}

void GradientStore::scale(double s) {
  for (auto& [p, g] : grads_) {
    for (double& v : g.values()) v *= s;
  }
}

Tensor GradientStore::get(const Parameter& p) const {
  const Tensor* g = find(p);
  return g ? *g : Tensor(p.value.shape());
}

Var Tape::push(Node node) {
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Var Tape::constant(Tensor value) {
  Node n;
  n.owned = std::move(value);
  return push(std::move(n));
}

Var Tape::leaf(Tensor value) {
  Node n;
  n.owned = std::move(value);
  n.requires_grad = grad_enabled_;
  return push(std::move(n));
}

Var Tape::param(const Parameter& p) {
  if (auto it = param_nodes_.find(&p); it != param_nodes_.end()) return Var(this, it->second);
  Node n;
  n.ref = &p.value;
  n.requires_grad = grad_enabled_;
  if (grad_enabled_ && sink_ != nullptr) n.external_grad = &sink_->slot(p);
  Var v = push(std::move(n));
  param_nodes_.emplace(&p, v.id_);
  return v;
}

Var Tape::record(Tensor value, std::initializer_list<Var> inputs, Backward backward) {
  return record(std::move(value), std::vector<Var>(inputs), std::move(backward));
}

Var Tape::record(Tensor value, const std::vector<Var>& inputs, Backward backward) {
  Node n;
  n.owned = std::move(value);
  if (grad_enabled_) {
    for (const Var& in : inputs) {
      if (in.tape_ != this) throw std::logic_error("tape: input recorded on another tape");
      if (nodes_[in.id_].requires_grad) n.requires_grad = true;
    }
    if (n.requires_grad) n.backward = std::move(backward);
  }
  return push(std::move(n));
}

const Tensor& Tape::value(Var v) const {
  const Node& n = nodes_[v.id_];
  return n.ref ? *n.ref : n.owned;
}

Tensor& Tape::grad_buffer(Var v) {
  Node& n = nodes_[v.id_];
  if (n.external_grad) return *n.external_grad;
  if (n.grad.empty() && value(v).size() > 0) n.grad = Tensor(value(v).shape());
  if (n.grad.shape() != value(v).shape()) n.grad = Tensor(value(v).shape());
  return n.grad;
}

const Tensor* Tape::grad(Var v) const {
  const Node& n = nodes_[v.id_];
  if (n.external_grad) return n.external_grad;
  return n.grad.empty() ? nullptr : &n.grad;
}

void Tape::backward(Var root, const Tensor* seed) {
  if (!grad_enabled_) throw std::logic_error("tape: backward on a tape without gradients");
  if (!nodes_[root.id_].requires_grad) return;
  Tensor& g = grad_buffer(root);
  if (seed) {
    if (seed->shape() != value(root).shape()) throw std::invalid_argument("tape: seed shape mismatch");
    add_inplace(g, *seed);
  } else {
    if (value(root).size() != 1) throw std::invalid_argument("tape: implicit seed needs a scalar root");
    g[0] += 1.0;
  }
  for (std::size_t i = root.id_ + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.backward || n.grad.empty()) continue;
    n.backward(n.grad);
    // Intermediate gradients are not needed once propagated.
    n.grad = Tensor();
  }
}

}  // namespace ctsl
