#include "mmt/tensor.hpp"

#include <iostream>
#include <sstream>
#include <stdexcept>

#include "mmt/log.hpp"

namespace mmt {

int64_t shape_numel(const Shape& shape) {
  int64_t n = 1;
  for (int64_t d : shape) {
    if (d < 0) throw std::invalid_argument("negative dimension in shape " + shape_str(shape));
    n *= d;
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0f, requires_grad); }

Tensor Tensor::full(Shape shape, Real value, bool requires_grad) {
  const int64_t n = shape_numel(shape);
  return from(std::move(shape), std::vector<Real>(static_cast<size_t>(n), value), requires_grad);
}

Tensor Tensor::from(Shape shape, std::vector<Real> data, bool requires_grad) {
  if (shape_numel(shape) != static_cast<int64_t>(data.size())) {
    throw std::invalid_argument("tensor: shape " + shape_str(shape) + " does not match " +
                                std::to_string(data.size()) + " values");
  }
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::scalar(Real value) { return from({}, {value}); }

int64_t Tensor::dim(int axis) const {
  const int n = ndim();
  if (axis < 0) axis += n;
  if (axis < 0 || axis >= n) throw std::out_of_range("tensor: axis out of range for shape " + shape_str(shape()));
  return impl_->shape[static_cast<size_t>(axis)];
}

Real Tensor::item() const {
  if (numel() != 1) throw std::invalid_argument("tensor: item() on shape " + shape_str(shape()));
  return impl_->data[0];
}

std::span<Real> Tensor::grad_buffer() {
  if (impl_->grad.size() != impl_->data.size()) impl_->grad.assign(impl_->data.size(), 0.0f);
  return impl_->grad;
}

void Tensor::zero_grad() {
  if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0f);
}

Tensor Tensor::clone(bool requires_grad) const { return from(impl_->shape, impl_->data, requires_grad); }

void Graph::record(std::string_view kind, std::vector<Tensor> inputs, Tensor output,
                   std::function<void()> backward) {
  nodes_.push_back(GraphNode{kind, std::move(inputs), std::move(output), std::move(backward)});
}

namespace {
thread_local Graph* g_active = nullptr;
}

GraphScope::GraphScope(Graph& graph) : previous_(g_active) { g_active = &graph; }
GraphScope::~GraphScope() { g_active = previous_; }
Graph* active_graph() { return g_active; }

BackwardReport backward(Graph& graph, const Tensor& root,
                        std::span<const std::pair<std::string, Tensor>> params) {
  if (!root.defined() || root.numel() != 1) {
    throw std::invalid_argument("backward: root must be a scalar, got shape " +
                                (root.defined() ? shape_str(root.shape()) : std::string("<undefined>")));
  }
  // Each sweep accumulates into fresh leaf buffers; prior gradients are
  // added back once at the end so repeated sweeps sum exactly.
  std::vector<std::pair<TensorImpl*, std::vector<Real>>> saved;
  auto stash = [&saved](TensorImpl* impl) {
    for (const auto& entry : saved)
      if (entry.first == impl) return;
    saved.emplace_back(impl, std::move(impl->grad));
    impl->grad.clear();
    impl->grad_touched = false;
  };
  for (const auto& [name, p] : params) stash(p.impl());
  for (auto& node : graph.nodes()) {
    for (const auto& in : node.inputs) {
      if (in.defined() && in.is_leaf()) stash(in.impl());
    }
    Tensor out = node.output;
    out.zero_grad();
  }
  Tensor r = root;
  r.grad_buffer()[0] += 1;
  root.impl()->grad_touched = true;

  const auto& nodes = graph.nodes();
  for (auto it = nodes.rbegin(); it != nodes.rend(); ++it) {
    if (!it->output.has_grad()) continue;
    it->backward();
  }
  for (auto& [impl, old] : saved) {
    if (old.empty()) continue;
    if (impl->grad.empty()) {
      impl->grad = std::move(old);
    } else {
      for (size_t i = 0; i < old.size(); ++i) impl->grad[i] = old[i] + impl->grad[i];
    }
  }

  BackwardReport report;
  for (const auto& [name, p] : params) {
    Tensor t = p;
    t.grad_buffer();
    if (!p.impl()->grad_touched) {
      report.disconnected.push_back(name);
      log_warn("backward: parameter '" + name + "' is disconnected from the loss; gradient is zero");
    }
  }
  return report;
}

namespace detail {

bool wants_grad(const Tensor& t) { return t.defined() && t.requires_grad(); }

std::span<Real> grad_of(const Tensor& t) {
  Tensor copy = t;
  t.impl()->grad_touched = true;
  return copy.grad_buffer();
}

Tensor make_result(Shape shape, std::vector<Real> data, std::initializer_list<Tensor> inputs) {
  Tensor out = Tensor::from(std::move(shape), std::move(data));
  bool needs = false;
  if (active_graph() != nullptr) {
    for (const auto& in : inputs) needs = needs || wants_grad(in);
  }
  out.set_requires_grad(needs);
  out.impl()->is_leaf = false;
  return out;
}

}  // namespace detail
}  // namespace mmt
