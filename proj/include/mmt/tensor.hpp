#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace mmt {

#ifdef MMT_REAL_DOUBLE
using Real = double;
#else
using Real = float;
#endif

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct TensorImpl {
  Shape shape;
  std::vector<Real> data;
  std::vector<Real> grad;  // allocated on first accumulation
  bool requires_grad = false;
  bool is_leaf = true;
  bool grad_touched = false;
};

// Dense row-major float32 tensor with shared storage. Copies alias.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, Real value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<Real> data, bool requires_grad = false);
  static Tensor scalar(Real value);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  int ndim() const { return static_cast<int>(impl_->shape.size()); }
  int64_t dim(int axis) const;
  int64_t numel() const { return static_cast<int64_t>(impl_->data.size()); }

  std::span<const Real> data() const { return impl_->data; }
  // Mutation is reserved for initialization and optimizer updates.
  std::span<Real> mutable_data() { return impl_->data; }
  const std::vector<Real>& values() const { return impl_->data; }
  Real item() const;
  Real at(int64_t flat) const { return impl_->data[static_cast<size_t>(flat)]; }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool on) { impl_->requires_grad = on; }
  bool is_leaf() const { return impl_->is_leaf; }

  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const Real> grad() const { return impl_->grad; }
  std::span<Real> grad_buffer();  // allocates zeros if absent
  void zero_grad();

  Tensor clone(bool requires_grad = false) const;

  TensorImpl* impl() const { return impl_.get(); }
  bool same(const Tensor& other) const { return impl_ == other.impl_; }

 private:
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}
  std::shared_ptr<TensorImpl> impl_;
};

// One recorded primitive application. Inputs always precede the node that
// consumes them, so the node list is a topological order.
struct GraphNode {
  std::string_view kind;
  std::vector<Tensor> inputs;
  Tensor output;
  std::function<void()> backward;
};

class Graph {
 public:
  void record(std::string_view kind, std::vector<Tensor> inputs, Tensor output,
              std::function<void()> backward);
  const std::vector<GraphNode>& nodes() const { return nodes_; }
  size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

 private:
  std::vector<GraphNode> nodes_;
};

// Makes `graph` the recording target for ops on this thread while alive.
// Without an active scope ops run eagerly and record nothing.
class GraphScope {
 public:
  explicit GraphScope(Graph& graph);
  ~GraphScope();
  GraphScope(const GraphScope&) = delete;
  GraphScope& operator=(const GraphScope&) = delete;

 private:
  Graph* previous_;
};

Graph* active_graph();

struct BackwardReport {
  std::vector<std::string> disconnected;  // named params that received no gradient
};

// Reverse-mode sweep from a scalar root. Leaf gradients accumulate across
// calls; intermediate gradients are reset at the start of every sweep.
// Listed parameters that the sweep never reaches get a zero gradient and
// are reported (and logged) as disconnected.
BackwardReport backward(Graph& graph, const Tensor& root,
                        std::span<const std::pair<std::string, Tensor>> params = {});

// Gradient accumulation helpers used by op implementations.
namespace detail {
bool wants_grad(const Tensor& t);
std::span<Real> grad_of(const Tensor& t);
Tensor make_result(Shape shape, std::vector<Real> data, std::initializer_list<Tensor> inputs);
}  // namespace detail

}  // namespace mmt
