#pragma once

#include <functional>

#include "mmt/optim.hpp"
#include "mmt/rng.hpp"

namespace mmt {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst_param;
  int64_t worst_index = -1;
  int64_t coords_checked = 0;
};

struct GradCheckOptions {
  double eps = 1e-3;
  int64_t max_coords_per_param = 24;  // sampled coordinates; all when the tensor is smaller
  uint64_t seed = 7;
};

// Compares reverse-mode gradients of a deterministic scalar function with
// central differences. Error per coordinate is
//   |analytic - (f(x+eps) - f(x-eps)) / (2 eps)| / max(|analytic|, eps).
// `fn` must rebuild its result from the current parameter values on every
// call. Throws if any evaluation is non-finite.
GradCheckResult finite_difference_check(const std::function<Tensor()>& fn, const NamedParams& params,
                                        const GradCheckOptions& options = {});

}  // namespace mmt
