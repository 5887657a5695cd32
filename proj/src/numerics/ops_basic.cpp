#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <string>

#include "kernels.hpp"
#include "mmt/ops.hpp"

namespace mmt::ops {

using detail::grad_of;
using detail::make_result;
using detail::wants_grad;

namespace {

template <class Fn>
void record(std::string_view kind, std::vector<Tensor> inputs, const Tensor& out, Fn&& fn) {
  if (!out.requires_grad()) return;
  active_graph()->record(kind, std::move(inputs), out, std::forward<Fn>(fn));
}

int norm_axis(int axis, int ndim) {
  if (axis < 0) axis += ndim;
  if (axis < 0 || axis >= ndim) throw std::out_of_range("axis out of range");
  return axis;
}

bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

struct Broadcast {
  Shape out_shape;
  int64_t n = 0, na = 0, nb = 0;
};

Broadcast plan_broadcast(const Tensor& a, const Tensor& b, const char* name) {
  Broadcast p;
  p.na = a.numel();
  p.nb = b.numel();
  if (a.shape() == b.shape() || p.nb == 1 || is_suffix(b.shape(), a.shape())) {
    p.out_shape = a.shape();
  } else if (p.na == 1 || is_suffix(a.shape(), b.shape())) {
    p.out_shape = b.shape();
  } else {
    throw std::invalid_argument(std::string(name) + ": incompatible shapes " + shape_str(a.shape()) + " and " +
                                shape_str(b.shape()));
  }
  p.n = shape_numel(p.out_shape);
  return p;
}

enum class BinOp { add, sub, mul, div };

Tensor binary(const Tensor& a, const Tensor& b, BinOp op, const char* name) {
  const Broadcast p = plan_broadcast(a, b, name);
  const Real* av = a.data().data();
  const Real* bv = b.data().data();
  std::vector<Real> out(static_cast<size_t>(p.n));
  for (int64_t i = 0; i < p.n; ++i) {
    const Real x = av[i % p.na];
    const Real y = bv[i % p.nb];
    switch (op) {
      case BinOp::add: out[i] = x + y; break;
      case BinOp::sub: out[i] = x - y; break;
      case BinOp::mul: out[i] = x * y; break;
      case BinOp::div: out[i] = x / y; break;
    }
  }
  Tensor res = make_result(p.out_shape, std::move(out), {a, b});
  record(name, {a, b}, res, [a, b, res, p, op]() {
    const auto g = res.grad();
    const Real* av = a.data().data();
    const Real* bv = b.data().data();
    if (wants_grad(a)) {
      auto ga = grad_of(a);
      for (int64_t i = 0; i < p.n; ++i) {
        Real d = g[i];
        if (op == BinOp::mul) d *= bv[i % p.nb];
        if (op == BinOp::div) d /= bv[i % p.nb];
        ga[i % p.na] += d;
      }
    }
    if (wants_grad(b)) {
      auto gb = grad_of(b);
      for (int64_t i = 0; i < p.n; ++i) {
        Real d = g[i];
        const Real y = bv[i % p.nb];
        if (op == BinOp::sub) d = -d;
        if (op == BinOp::mul) d *= av[i % p.na];
        if (op == BinOp::div) d *= -av[i % p.na] / (y * y);
        gb[i % p.nb] += d;
      }
    }
  });
  return res;
}

// Elementwise unary op with derivative expressed through (x, y).
template <class F, class D>
Tensor unary(const Tensor& x, std::string_view name, F f, D dfdx) {
  const auto xv = x.data();
  std::vector<Real> out(xv.size());
  for (size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
  Tensor res = make_result(x.shape(), std::move(out), {x});
  record(name, {x}, res, [x, res, dfdx]() {
    const auto g = res.grad();
    const auto xv = x.data();
    const auto yv = res.data();
    auto gx = grad_of(x);
    for (size_t i = 0; i < xv.size(); ++i) gx[i] += g[i] * dfdx(xv[i], yv[i]);
  });
  return res;
}

struct AxisSplit {
  int64_t outer = 1, len = 1, inner = 1;
};

AxisSplit split_axis(const Shape& s, int axis) {
  AxisSplit r;
  for (int i = 0; i < axis; ++i) r.outer *= s[i];
  r.len = s[axis];
  for (size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

Shape reduced_shape(const Shape& s, int axis, bool keepdim) {
  Shape out = s;
  if (keepdim) {
    out[axis] = 1;
  } else {
    out.erase(out.begin() + axis);
  }
  return out;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::add, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::sub, "sub"); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::mul, "mul"); }
Tensor div(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::div, "div"); }

Tensor scale(const Tensor& x, Real c) {
  return unary(x, "scale", [c](Real v) { return v * c; }, [c](Real, Real) { return c; });
}

Tensor add_scalar(const Tensor& x, Real c) {
  return unary(x, "add_scalar", [c](Real v) { return v + c; }, [](Real, Real) { return 1.0f; });
}

Tensor exp(const Tensor& x) {
  return unary(x, "exp", [](Real v) { return std::exp(v); }, [](Real, Real y) { return y; });
}

Tensor log(const Tensor& x) {
  return unary(x, "log", [](Real v) { return std::log(v); }, [](Real v, Real) { return 1.0f / v; });
}

Tensor pow(const Tensor& x, Real p) {
  return unary(
      x, "pow", [p](Real v) { return std::pow(v, p); },
      [p](Real v, Real) { return p * std::pow(v, p - 1.0f); });
}

Tensor sigmoid(const Tensor& x) {
  return unary(
      x, "sigmoid", [](Real v) { return 1.0f / (1.0f + std::exp(-v)); },
      [](Real, Real y) { return y * (1.0f - y); });
}

Tensor silu(const Tensor& x) {
  return unary(
      x, "silu", [](Real v) { return v / (1.0f + std::exp(-v)); },
      [](Real v, Real) {
        const Real s = 1.0f / (1.0f + std::exp(-v));
        return s * (1.0f + v * (1.0f - s));
      });
}

Tensor log_sigmoid(const Tensor& x) {
  return unary(
      x, "log_sigmoid",
      [](Real v) { return v >= 0 ? -std::log1p(std::exp(-v)) : v - std::log1p(std::exp(v)); },
      [](Real v, Real) { return 1.0f / (1.0f + std::exp(v)); });
}

Tensor sum(const Tensor& x) {
  const auto xv = x.data();
  double s = 0.0;
  for (Real v : xv) s += v;
  Tensor res = make_result({}, {static_cast<Real>(s)}, {x});
  record("sum", {x}, res, [x, res]() {
    const Real g = res.grad()[0];
    for (auto& v : grad_of(x)) v += g;
  });
  return res;
}

Tensor mean(const Tensor& x) {
  if (x.numel() == 0) throw std::invalid_argument("mean: empty tensor");
  return scale(sum(x), 1.0f / static_cast<Real>(x.numel()));
}

Tensor sum_axis(const Tensor& x, int axis, bool keepdim) {
  axis = norm_axis(axis, x.ndim());
  const AxisSplit s = split_axis(x.shape(), axis);
  const auto xv = x.data();
  std::vector<Real> out(static_cast<size_t>(s.outer * s.inner), 0.0f);
  for (int64_t o = 0; o < s.outer; ++o)
    for (int64_t l = 0; l < s.len; ++l)
      for (int64_t i = 0; i < s.inner; ++i) out[o * s.inner + i] += xv[(o * s.len + l) * s.inner + i];
  Tensor res = make_result(reduced_shape(x.shape(), axis, keepdim), std::move(out), {x});
  record("sum_axis", {x}, res, [x, res, s]() {
    const auto g = res.grad();
    auto gx = grad_of(x);
    for (int64_t o = 0; o < s.outer; ++o)
      for (int64_t l = 0; l < s.len; ++l)
        for (int64_t i = 0; i < s.inner; ++i) gx[(o * s.len + l) * s.inner + i] += g[o * s.inner + i];
  });
  return res;
}

Tensor mean_axis(const Tensor& x, int axis, bool keepdim) {
  const int64_t len = x.dim(axis);
  return scale(sum_axis(x, axis, keepdim), 1.0f / static_cast<Real>(len));
}

Tensor max_axis(const Tensor& x, int axis, bool keepdim) {
  axis = norm_axis(axis, x.ndim());
  const AxisSplit s = split_axis(x.shape(), axis);
  if (s.len == 0) throw std::invalid_argument("max_axis: empty axis");
  const auto xv = x.data();
  std::vector<Real> out(static_cast<size_t>(s.outer * s.inner));
  std::vector<int64_t> arg(out.size());
  for (int64_t o = 0; o < s.outer; ++o)
    for (int64_t i = 0; i < s.inner; ++i) {
      int64_t best = 0;
      Real bv = xv[o * s.len * s.inner + i];
      for (int64_t l = 1; l < s.len; ++l) {
        const Real v = xv[(o * s.len + l) * s.inner + i];
        if (v > bv) {
          bv = v;
          best = l;
        }
      }
      out[o * s.inner + i] = bv;
      arg[o * s.inner + i] = best;
    }
  Tensor res = make_result(reduced_shape(x.shape(), axis, keepdim), std::move(out), {x});
  record("max_axis", {x}, res, [x, res, s, arg = std::move(arg)]() {
    const auto g = res.grad();
    auto gx = grad_of(x);
    for (int64_t o = 0; o < s.outer; ++o)
      for (int64_t i = 0; i < s.inner; ++i)
        gx[(o * s.len + arg[o * s.inner + i]) * s.inner + i] += g[o * s.inner + i];
  });
  return res;
}

Tensor softmax(const Tensor& x) {
  const int64_t n = x.dim(-1);
  const int64_t rows = x.numel() / std::max<int64_t>(n, 1);
  const auto xv = x.data();
  std::vector<Real> out(xv.size());
  for (int64_t r = 0; r < rows; ++r) {
    const Real* in = xv.data() + r * n;
    Real* o = out.data() + r * n;
    const Real mx = *std::max_element(in, in + n);
    Real total = 0.0f;
    for (int64_t j = 0; j < n; ++j) total += (o[j] = std::exp(in[j] - mx));
    for (int64_t j = 0; j < n; ++j) o[j] /= total;
  }
  Tensor res = make_result(x.shape(), std::move(out), {x});
  record("softmax", {x}, res, [x, res, n, rows]() {
    const auto g = res.grad();
    const auto y = res.data();
    auto gx = grad_of(x);
    for (int64_t r = 0; r < rows; ++r) {
      Real d = 0.0f;
      for (int64_t j = 0; j < n; ++j) d += g[r * n + j] * y[r * n + j];
      for (int64_t j = 0; j < n; ++j) gx[r * n + j] += y[r * n + j] * (g[r * n + j] - d);
    }
  });
  return res;
}

Tensor log_softmax(const Tensor& x) {
  const int64_t n = x.dim(-1);
  const int64_t rows = x.numel() / std::max<int64_t>(n, 1);
  const auto xv = x.data();
  std::vector<Real> out(xv.size());
  for (int64_t r = 0; r < rows; ++r) {
    const Real* in = xv.data() + r * n;
    Real* o = out.data() + r * n;
    const Real mx = *std::max_element(in, in + n);
    Real total = 0.0f;
    for (int64_t j = 0; j < n; ++j) total += std::exp(in[j] - mx);
    const Real lse = mx + std::log(total);
    for (int64_t j = 0; j < n; ++j) o[j] = in[j] - lse;
  }
  Tensor res = make_result(x.shape(), std::move(out), {x});
  record("log_softmax", {x}, res, [x, res, n, rows]() {
    const auto g = res.grad();
    const auto y = res.data();
    auto gx = grad_of(x);
    for (int64_t r = 0; r < rows; ++r) {
      Real gs = 0.0f;
      for (int64_t j = 0; j < n; ++j) gs += g[r * n + j];
      for (int64_t j = 0; j < n; ++j) gx[r * n + j] += g[r * n + j] - std::exp(y[r * n + j]) * gs;
    }
  });
  return res;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (b.ndim() != 2 || a.ndim() < 1 || a.dim(-1) != b.dim(0)) {
    throw std::invalid_argument("matmul: incompatible shapes " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const int64_t k = b.dim(0), n = b.dim(1);
  const int64_t m = a.numel() / std::max<int64_t>(k, 1);
  Shape out_shape = a.shape();
  out_shape.back() = n;
  std::vector<Real> out(static_cast<size_t>(m * n));
  kernels::matmul_nn(a.data().data(), b.data().data(), out.data(), m, k, n, false);
  Tensor res = make_result(std::move(out_shape), std::move(out), {a, b});
  record("matmul", {a, b}, res, [a, b, res, m, k, n]() {
    const Real* g = res.grad().data();
    if (wants_grad(a)) {
      std::vector<Real> bt(static_cast<size_t>(k * n));
      kernels::transpose2d(b.data().data(), bt.data(), k, n);
      kernels::matmul_nn(g, bt.data(), grad_of(a).data(), m, n, k, true);
    }
    if (wants_grad(b)) kernels::matmul_tn_acc(a.data().data(), g, grad_of(b).data(), m, k, n);
  });
  return res;
}

Tensor embedding(const Tensor& table, std::span<const int32_t> ids, const Shape& ids_shape) {
  if (table.ndim() != 2) throw std::invalid_argument("embedding: table must be 2-D");
  if (shape_numel(ids_shape) != static_cast<int64_t>(ids.size())) {
    throw std::invalid_argument("embedding: ids do not match ids_shape");
  }
  const int64_t vocab = table.dim(0), d = table.dim(1);
  std::vector<int32_t> idx(ids.begin(), ids.end());
  std::vector<Real> out(idx.size() * static_cast<size_t>(d));
  const auto tv = table.data();
  for (size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= vocab) {
      throw std::out_of_range("embedding: id " + std::to_string(idx[i]) + " outside [0," + std::to_string(vocab) + ")");
    }
    std::copy_n(tv.data() + idx[i] * d, d, out.data() + i * d);
  }
  Shape out_shape = ids_shape;
  out_shape.push_back(d);
  Tensor res = make_result(std::move(out_shape), std::move(out), {table});
  record("embedding", {table}, res, [table, res, d, idx = std::move(idx)]() {
    const auto g = res.grad();
    auto gt = grad_of(table);
    for (size_t i = 0; i < idx.size(); ++i)
      for (int64_t j = 0; j < d; ++j) gt[idx[i] * d + j] += g[i * d + j];
  });
  return res;
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw std::invalid_argument("concat: no inputs");
  axis = norm_axis(axis, parts[0].ndim());
  Shape out_shape = parts[0].shape();
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    Shape s = p.shape();
    if (static_cast<int>(s.size()) != static_cast<int>(out_shape.size())) throw std::invalid_argument("concat: rank mismatch");
    out_shape[axis] += s[axis];
    s[axis] = 0;
    Shape ref = out_shape;
    ref[axis] = 0;
    if (s != ref) throw std::invalid_argument("concat: shape mismatch " + shape_str(p.shape()));
  }
  const AxisSplit os = split_axis(out_shape, axis);
  std::vector<Real> out(static_cast<size_t>(shape_numel(out_shape)));
  std::vector<int64_t> offsets;
  int64_t off = 0;
  for (const auto& p : parts) {
    const int64_t len = p.dim(axis);
    const auto pv = p.data();
    for (int64_t o = 0; o < os.outer; ++o)
      std::copy_n(pv.data() + o * len * os.inner, len * os.inner, out.data() + (o * os.len + off) * os.inner);
    offsets.push_back(off);
    off += len;
  }
  Tensor res = Tensor::from(out_shape, std::move(out));
  bool needs = false;
  if (active_graph() != nullptr)
    for (const auto& p : parts) needs = needs || wants_grad(p);
  res.set_requires_grad(needs);
  res.impl()->is_leaf = false;
  record("concat", parts, res, [parts, res, os, offsets, axis]() {
    const auto g = res.grad();
    for (size_t pi = 0; pi < parts.size(); ++pi) {
      if (!wants_grad(parts[pi])) continue;
      const int64_t len = parts[pi].dim(axis);
      auto gp = grad_of(parts[pi]);
      for (int64_t o = 0; o < os.outer; ++o)
        for (int64_t e = 0; e < len * os.inner; ++e)
          gp[o * len * os.inner + e] += g[(o * os.len + offsets[pi]) * os.inner + e];
    }
  });
  return res;
}

Tensor slice(const Tensor& x, int axis, int64_t start, int64_t length) {
  axis = norm_axis(axis, x.ndim());
  const AxisSplit s = split_axis(x.shape(), axis);
  if (start < 0 || length < 0 || start + length > s.len) {
    throw std::out_of_range("slice: [" + std::to_string(start) + "," + std::to_string(start + length) +
                            ") outside axis of size " + std::to_string(s.len));
  }
  Shape out_shape = x.shape();
  out_shape[axis] = length;
  std::vector<Real> out(static_cast<size_t>(s.outer * length * s.inner));
  const auto xv = x.data();
  for (int64_t o = 0; o < s.outer; ++o)
    std::copy_n(xv.data() + (o * s.len + start) * s.inner, length * s.inner, out.data() + o * length * s.inner);
  Tensor res = make_result(std::move(out_shape), std::move(out), {x});
  record("slice", {x}, res, [x, res, s, start, length]() {
    const auto g = res.grad();
    auto gx = grad_of(x);
    for (int64_t o = 0; o < s.outer; ++o)
      for (int64_t e = 0; e < length * s.inner; ++e) gx[(o * s.len + start) * s.inner + e] += g[o * length * s.inner + e];
  });
  return res;
}

Tensor reshape(const Tensor& x, Shape shape) {
  int64_t known = 1;
  int infer = -1;
  for (size_t i = 0; i < shape.size(); ++i) {
    if (shape[i] == -1) {
      if (infer >= 0) throw std::invalid_argument("reshape: more than one inferred dimension");
      infer = static_cast<int>(i);
    } else {
      known *= shape[i];
    }
  }
  if (infer >= 0 && known > 0) shape[infer] = x.numel() / known;
  if (shape_numel(shape) != x.numel()) {
    throw std::invalid_argument("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
  }
  Tensor res = make_result(std::move(shape), x.values(), {x});
  record("reshape", {x}, res, [x, res]() {
    const auto g = res.grad();
    auto gx = grad_of(x);
    for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
  return res;
}

Tensor permute(const Tensor& x, const std::vector<int>& perm) {
  const int nd = x.ndim();
  if (static_cast<int>(perm.size()) != nd) throw std::invalid_argument("permute: rank mismatch");
  std::vector<bool> seen(nd, false);
  Shape out_shape(nd);
  for (int i = 0; i < nd; ++i) {
    if (perm[i] < 0 || perm[i] >= nd || seen[perm[i]]) throw std::invalid_argument("permute: invalid permutation");
    seen[perm[i]] = true;
    out_shape[i] = x.shape()[perm[i]];
  }
  std::vector<int64_t> in_strides(nd, 1);
  for (int i = nd - 2; i >= 0; --i) in_strides[i] = in_strides[i + 1] * x.shape()[i + 1];
  const int64_t n = x.numel();
  // map[out_flat] = in_flat
  std::vector<int64_t> map(static_cast<size_t>(n));
  std::vector<int64_t> idx(nd, 0);
  for (int64_t f = 0; f < n; ++f) {
    int64_t src = 0;
    for (int i = 0; i < nd; ++i) src += idx[i] * in_strides[perm[i]];
    map[f] = src;
    for (int i = nd - 1; i >= 0; --i) {
      if (++idx[i] < out_shape[i]) break;
      idx[i] = 0;
    }
  }
  const auto xv = x.data();
  std::vector<Real> out(static_cast<size_t>(n));
  for (int64_t f = 0; f < n; ++f) out[f] = xv[map[f]];
  Tensor res = make_result(std::move(out_shape), std::move(out), {x});
  record("permute", {x}, res, [x, res, map = std::move(map)]() {
    const auto g = res.grad();
    auto gx = grad_of(x);
    for (size_t f = 0; f < map.size(); ++f) gx[map[f]] += g[f];
  });
  return res;
}

Tensor transpose(const Tensor& x, int a, int b) {
  std::vector<int> perm(x.ndim());
  std::iota(perm.begin(), perm.end(), 0);
  std::swap(perm[norm_axis(a, x.ndim())], perm[norm_axis(b, x.ndim())]);
  return permute(x, perm);
}

Tensor detach(const Tensor& x) {
  Tensor res = Tensor::from(x.shape(), x.values());
  res.impl()->is_leaf = false;
  return res;
}

Tensor straight_through(const Tensor& continuous, const Tensor& quantized) {
  if (continuous.shape() != quantized.shape()) {
    throw std::invalid_argument("straight_through: shape mismatch " + shape_str(continuous.shape()) + " vs " +
                                shape_str(quantized.shape()));
  }
  Tensor res = make_result(quantized.shape(), quantized.values(), {continuous});
  record("straight_through", {continuous}, res, [continuous, res]() {
    const auto g = res.grad();
    auto gc = grad_of(continuous);
    for (size_t i = 0; i < g.size(); ++i) gc[i] += g[i];
  });
  return res;
}

Tensor dropout(const Tensor& x, Real p, bool train, Rng& rng) {
  if (!train || p <= 0.0f) return x;
  if (p >= 1.0f) throw std::invalid_argument("dropout: rate must be < 1");
  const Real keep_scale = 1.0f / (1.0f - p);
  const auto xv = x.data();
  std::vector<Real> mask(xv.size());
  std::vector<Real> out(xv.size());
  for (size_t i = 0; i < xv.size(); ++i) {
    mask[i] = rng.uniform() >= p ? keep_scale : 0.0f;
    out[i] = xv[i] * mask[i];
  }
  Tensor res = make_result(x.shape(), std::move(out), {x});
  record("dropout", {x}, res, [x, res, mask = std::move(mask)]() {
    const auto g = res.grad();
    auto gx = grad_of(x);
    for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * mask[i];
  });
  return res;
}

}  // namespace mmt::ops
