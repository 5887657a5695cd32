#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mmt/tensor.hpp"

namespace mmt {

using NamedParams = std::vector<std::pair<std::string, Tensor>>;

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.1;
};

// Adam with decoupled weight decay. Decay applies to parameters with two or
// more dimensions (matrices, embeddings, conv kernels); gains and biases are
// left undecayed.
class AdamW {
 public:
  explicit AdamW(AdamConfig config = {}) : config_(config) {}

  // Applies one update from the parameters' accumulated gradients. Throws
  // without touching any parameter if a gradient is NaN or infinite.
  void step(std::span<const std::pair<std::string, Tensor>> params, double lr);

  int64_t steps() const { return step_; }
  const AdamConfig& config() const { return config_; }

  struct Moments {
    std::vector<Real> m, v;
  };
  const std::map<std::string, Moments>& moments() const { return moments_; }
  void restore(int64_t step, std::map<std::string, Moments> moments);

 private:
  AdamConfig config_;
  int64_t step_ = 0;
  std::map<std::string, Moments> moments_;
};

void zero_grads(std::span<const std::pair<std::string, Tensor>> params);

// base_lr * 0.5 * (1 + cos(pi * step / total_steps))
double cosine_lr(int64_t step, int64_t total_steps, double base_lr);

// Cosine schedule whose final 10% of steps decays linearly to zero from the
// cosine value at the 90% mark.
double cosine_linear_tail_lr(int64_t step, int64_t total_steps, double base_lr);

}  // namespace mmt
