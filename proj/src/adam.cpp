#include "ctsl/adam.hpp"

#include <cmath>

namespace ctsl {

Adam::Adam(ParameterList params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
  for (Parameter* p : params_) {
    state_.emplace(p, Moments{Tensor(p->value.shape()), Tensor(p->value.shape())});
  }
}

void Adam::step(const GradientStore& grads) {
  ++step_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, double(step_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, double(step_));
  for (Parameter* p : params_) {
    Moments& mom = state_.at(p);
    const Tensor* g = grads.find(*p);
    double* theta = p->value.data();
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      const double gi = (g ? (*g)[i] : 0.0) + cfg_.weight_decay * theta[i];
      mom.m[i] = cfg_.beta1 * mom.m[i] + (1.0 - cfg_.beta1) * gi;
      mom.v[i] = cfg_.beta2 * mom.v[i] + (1.0 - cfg_.beta2) * gi * gi;
      const double mhat = mom.m[i] / bc1;
      const double vhat = mom.v[i] / bc2;
      theta[i] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
    }
  }
}

double step_lr(double base_lr, std::size_t epoch, std::size_t step_size, double gamma) {
  if (step_size == 0) return base_lr;
  return base_lr * std::pow(gamma, double(epoch / step_size));
}

}  // namespace ctsl
