#include "mmt/optim.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace mmt {

void AdamW::step(std::span<const std::pair<std::string, Tensor>> params, double lr) {
  for (const auto& [name, p] : params) {
    for (Real g : p.grad()) {
      if (!std::isfinite(g)) throw std::runtime_error("adam: non-finite gradient in '" + name + "'; step rejected");
    }
  }
  ++step_;
  const double b1 = config_.beta1, b2 = config_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(step_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(step_));
  for (const auto& [name, param] : params) {
    Tensor p = param;
    auto data = p.mutable_data();
    const size_t n = data.size();
    auto& mom = moments_[name];
    if (mom.m.size() != n) {
      mom.m.assign(n, 0);
      mom.v.assign(n, 0);
    }
    const auto grad = p.has_grad() ? p.grad() : std::span<const Real>();
    const bool decay = p.ndim() >= 2 && config_.weight_decay != 0.0;
    for (size_t i = 0; i < n; ++i) {
      const double g = grad.empty() ? 0.0 : grad[i];
      mom.m[i] = static_cast<Real>(b1 * mom.m[i] + (1.0 - b1) * g);
      mom.v[i] = static_cast<Real>(b2 * mom.v[i] + (1.0 - b2) * g * g);
      const double mhat = mom.m[i] / c1;
      const double vhat = mom.v[i] / c2;
      double x = data[i];
      if (decay) x -= lr * config_.weight_decay * x;
      x -= lr * mhat / (std::sqrt(vhat) + config_.eps);
      data[i] = static_cast<Real>(x);
    }
  }
}

void AdamW::restore(int64_t step, std::map<std::string, Moments> moments) {
  step_ = step;
  moments_ = std::move(moments);
}

void zero_grads(std::span<const std::pair<std::string, Tensor>> params) {
  for (const auto& [name, p] : params) {
    Tensor t = p;
    t.zero_grad();
  }
}

double cosine_lr(int64_t step, int64_t total_steps, double base_lr) {
  if (total_steps <= 0) throw std::invalid_argument("cosine_lr: total_steps must be positive");
  if (step < 0 || step > total_steps) throw std::out_of_range("cosine_lr: step outside [0, total_steps]");
  const double frac = static_cast<double>(step) / static_cast<double>(total_steps);
  return base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * frac));
}

double cosine_linear_tail_lr(int64_t step, int64_t total_steps, double base_lr) {
  if (total_steps <= 0) throw std::invalid_argument("cosine_linear_tail_lr: total_steps must be positive");
  if (step < 0 || step > total_steps) throw std::out_of_range("cosine_linear_tail_lr: step outside [0, total_steps]");
  const int64_t tail_start = total_steps - std::max<int64_t>(1, total_steps / 10);
  if (step <= tail_start) return cosine_lr(step, total_steps, base_lr);
  const double at_tail = cosine_lr(tail_start, total_steps, base_lr);
  return at_tail * static_cast<double>(total_steps - step) / static_cast<double>(total_steps - tail_start);
}

}  // namespace mmt
