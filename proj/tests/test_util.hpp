#pragma once

#include <vector>

#include "mmt/ops.hpp"
#include "mmt/optim.hpp"
#include "mmt/rng.hpp"

namespace mmt::testing {

inline Tensor random_tensor(Shape shape, Rng& rng, double scale = 1.0, bool requires_grad = true) {
  std::vector<Real> v(static_cast<size_t>(shape_numel(shape)));
  for (auto& x : v) x = static_cast<Real>(rng.normal() * scale);
  return Tensor::from(std::move(shape), std::move(v), requires_grad);
}

inline Tensor positive_tensor(Shape shape, Rng& rng, bool requires_grad = true) {
  std::vector<Real> v(static_cast<size_t>(shape_numel(shape)));
  for (auto& x : v) x = static_cast<Real>(0.5 + rng.uniform());
  return Tensor::from(std::move(shape), std::move(v), requires_grad);
}

// sum(y * r) for a fixed random r, so every output coordinate matters.
inline Tensor project(const Tensor& y, const Tensor& r) { return ops::sum(ops::mul(y, r)); }

}  // namespace mmt::testing
