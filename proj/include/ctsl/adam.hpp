#pragma once

#include <cstddef>
#include <unordered_map>

#include "ctsl/autograd.hpp"

namespace ctsl {

struct AdamConfig {
  double lr = 5e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-5;  // L2 term added to the gradient
};

class Adam {
 public:
  Adam(ParameterList params, AdamConfig cfg);

  void set_lr(double lr) { cfg_.lr = lr; }
  double lr() const { return cfg_.lr; }
  std::size_t steps() const { return step_; }

  // Parameters without an entry in `grads` still receive the weight-decay term.
  void step(const GradientStore& grads);

 private:
  struct Moments {
    Tensor m, v;
  };
  ParameterList params_;
  AdamConfig cfg_;
  std::unordered_map<const Parameter*, Moments> state_;
  std::size_t step_ = 0;
};

// Step-decay schedule: lr = base * gamma^(epoch / step_size).
double step_lr(double base_lr, std::size_t epoch, std::size_t step_size, double gamma);

}  // namespace ctsl
