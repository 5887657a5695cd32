#include "mmt/gradcheck.hpp"

#include <cmath>
#include <stdexcept>

namespace mmt {

namespace {
double eval_scalar(const std::function<Tensor()>& fn) {
  const Tensor out = fn();
  if (out.numel() != 1) throw std::invalid_argument("finite_difference_check: function must return a scalar");
  const double v = out.item();
  if (!std::isfinite(v)) throw std::runtime_error("finite_difference_check: non-finite function value");
  return v;
}
}  // namespace

GradCheckResult finite_difference_check(const std::function<Tensor()>& fn, const NamedParams& params,
                                        const GradCheckOptions& options) {
  if (!(options.eps > 0.0)) throw std::invalid_argument("finite_difference_check: eps must be positive");
  zero_grads(params);
  {
    Graph graph;
    Tensor out;
    {
      GraphScope scope(graph);
      out = fn();
    }
    backward(graph, out, params);
  }
  GradCheckResult result;
  Rng rng(options.seed);
  for (const auto& [name, param] : params) {
    Tensor p = param;
    const std::vector<Real> analytic(p.grad().begin(), p.grad().end());
    const int64_t n = p.numel();
    std::vector<int64_t> coords;
    if (n <= options.max_coords_per_param) {
      for (int64_t i = 0; i < n; ++i) coords.push_back(i);
    } else {
      for (int64_t c = 0; c < options.max_coords_per_param; ++c) coords.push_back(static_cast<int64_t>(rng.below(n)));
    }
    for (int64_t i : coords) {
      auto data = p.mutable_data();
      const Real original = data[i];
      data[i] = static_cast<Real>(original + options.eps);
      const double up = eval_scalar(fn);
      data[i] = static_cast<Real>(original - options.eps);
      const double down = eval_scalar(fn);
      data[i] = original;
      const double fd = (up - down) / (2.0 * options.eps);
      const double a = analytic[i];
      if (!std::isfinite(a)) throw std::runtime_error("finite_difference_check: non-finite analytic gradient in " + name);
      const double err = std::abs(a - fd) / std::max(std::abs(a), options.eps);
      ++result.coords_checked;
      if (err > result.max_rel_error || result.worst_index < 0) {
        result.max_rel_error = std::max(result.max_rel_error, err);
        if (err >= result.max_rel_error) {
          result.worst_param = name;
          result.worst_index = i;
        }
      }
    }
  }
  return result;
}

}  // namespace mmt
