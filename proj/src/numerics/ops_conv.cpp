#include <algorithm>
#include <stdexcept>
#include <string>

#include "kernels.hpp"
#include "mmt/ops.hpp"

namespace mmt::ops {

using detail::grad_of;
using detail::make_result;
using detail::wants_grad;

namespace {

// Sliding-window geometry: `src` is the dense volume the kernel slides over
// and `dst` the grid of window positions.
struct Geometry {
  int64_t channels = 0;
  Int3 src{}, dst{}, k{}, stride{}, pad{};
  int64_t src_size() const { return int64_t{src[0]} * src[1] * src[2]; }
  int64_t dst_size() const { return int64_t{dst[0]} * dst[1] * dst[2]; }
  int64_t ksize() const { return int64_t{k[0]} * k[1] * k[2]; }
  int64_t row() const { return channels * ksize(); }
};

constexpr int64_t kChunk = 4096;  // window positions per im2col block

// col[p - p0, c * K + kk] = vol[c, window(p, kk)] (0 outside the volume)
void im2col(const Geometry& g, const Real* vol, Real* col, int64_t p0, int64_t p1) {
  const int64_t R = g.row();
  for (int64_t p = p0; p < p1; ++p) {
        const int ot = static_cast<int>(p / (int64_t{g.dst[1]} * g.dst[2]));
        const int oh = static_cast<int>(p / g.dst[2] % g.dst[1]);
        const int ow = static_cast<int>(p % g.dst[2]);
        Real* r = col + (p - p0) * R;
        for (int64_t c = 0; c < g.channels; ++c) {
          const Real* v = vol + c * g.src_size();
          for (int kt = 0; kt < g.k[0]; ++kt) {
            const int it = ot * g.stride[0] - g.pad[0] + kt;
            for (int kh = 0; kh < g.k[1]; ++kh) {
              const int ih = oh * g.stride[1] - g.pad[1] + kh;
              for (int kw = 0; kw < g.k[2]; ++kw, ++r) {
                const int iw = ow * g.stride[2] - g.pad[2] + kw;
                const bool inside = it >= 0 && it < g.src[0] && ih >= 0 && ih < g.src[1] && iw >= 0 && iw < g.src[2];
                *r = inside ? v[(int64_t{it} * g.src[1] + ih) * g.src[2] + iw] : 0.0f;
              }
            }
          }
        }
  }
}

// Adjoint of im2col: vol += scatter(col).
void col2im(const Geometry& g, const Real* col, Real* vol, int64_t p0, int64_t p1) {
  for (int64_t p = p0; p < p1; ++p) {
        const int ot = static_cast<int>(p / (int64_t{g.dst[1]} * g.dst[2]));
        const int oh = static_cast<int>(p / g.dst[2] % g.dst[1]);
        const int ow = static_cast<int>(p % g.dst[2]);
        const Real* r = col + (p - p0) * g.row();
        for (int64_t c = 0; c < g.channels; ++c) {
          Real* v = vol + c * g.src_size();
          for (int kt = 0; kt < g.k[0]; ++kt) {
            const int it = ot * g.stride[0] - g.pad[0] + kt;
            for (int kh = 0; kh < g.k[1]; ++kh) {
              const int ih = oh * g.stride[1] - g.pad[1] + kh;
              for (int kw = 0; kw < g.k[2]; ++kw, ++r) {
                const int iw = ow * g.stride[2] - g.pad[2] + kw;
                if (it >= 0 && it < g.src[0] && ih >= 0 && ih < g.src[1] && iw >= 0 && iw < g.src[2])
                  v[(int64_t{it} * g.src[1] + ih) * g.src[2] + iw] += *r;
              }
            }
          }
        }
  }
}

void check_5d(const Tensor& x, const char* name) {
  if (x.ndim() != 5) throw std::invalid_argument(std::string(name) + ": expected 5-D input, got " + shape_str(x.shape()));
}

void check_bias(const Tensor& bias, int64_t channels, const char* name) {
  if (bias.defined() && (bias.ndim() != 1 || bias.dim(0) != channels))
    throw std::invalid_argument(std::string(name) + ": bias shape " + shape_str(bias.shape()));
}

}  // namespace

Tensor conv3d(const Tensor& x, const Tensor& w, const Tensor& bias, Int3 stride, Int3 pad) {
  check_5d(x, "conv3d");
  check_5d(w, "conv3d");
  const int64_t B = x.dim(0), Cin = x.dim(1), Cout = w.dim(0);
  if (w.dim(1) != Cin) throw std::invalid_argument("conv3d: weight " + shape_str(w.shape()) + " vs input " + shape_str(x.shape()));
  check_bias(bias, Cout, "conv3d");
  Geometry g;
  g.channels = Cin;
  g.k = {static_cast<int>(w.dim(2)), static_cast<int>(w.dim(3)), static_cast<int>(w.dim(4))};
  g.stride = stride;
  g.pad = pad;
  for (int a = 0; a < 3; ++a) {
    g.src[a] = static_cast<int>(x.dim(2 + a));
    const int span = g.src[a] + 2 * pad[a] - g.k[a];
    if (span < 0 || stride[a] < 1) throw std::invalid_argument("conv3d: kernel larger than padded input " + shape_str(x.shape()));
    g.dst[a] = span / stride[a] + 1;
  }
  const int64_t P = g.dst_size(), R = g.row();
  const int64_t chunk = std::min(P, kChunk);
  std::vector<Real> wt(static_cast<size_t>(R * Cout));
  kernels::transpose2d(w.data().data(), wt.data(), Cout, R);

  std::vector<Real> out(static_cast<size_t>(B * Cout * P));
  std::vector<Real> col(static_cast<size_t>(chunk * R));
  std::vector<Real> outT(static_cast<size_t>(chunk * Cout));
  for (int64_t b = 0; b < B; ++b) {
    Real* o = out.data() + b * Cout * P;
    for (int64_t p0 = 0; p0 < P; p0 += chunk) {
      const int64_t n = std::min(chunk, P - p0);
      im2col(g, x.data().data() + b * Cin * g.src_size(), col.data(), p0, p0 + n);
      kernels::matmul_nn(col.data(), wt.data(), outT.data(), n, R, Cout, false);
      for (int64_t i = 0; i < n; ++i)
        for (int64_t c = 0; c < Cout; ++c) o[c * P + p0 + i] = outT[i * Cout + c];
    }
    if (bias.defined())
      for (int64_t c = 0; c < Cout; ++c)
        for (int64_t p = 0; p < P; ++p) o[c * P + p] += bias.data()[c];
  }
  Tensor res = make_result({B, Cout, g.dst[0], g.dst[1], g.dst[2]}, std::move(out), {x, w, bias});
  if (!res.requires_grad()) return res;
  active_graph()->record("conv3d", {x, w, bias}, res, [x, w, bias, res, g, B, Cin, Cout, P, R, chunk]() {
    const Real* gout = res.grad().data();
    std::vector<Real> col(static_cast<size_t>(chunk * R));
    std::vector<Real> goutT(static_cast<size_t>(chunk * Cout));
    std::vector<Real> gwt(static_cast<size_t>(R * Cout), 0.0f);
    std::vector<Real> gcol(static_cast<size_t>(chunk * R));
    for (int64_t b = 0; b < B; ++b) {
      const Real* go = gout + b * Cout * P;
      for (int64_t p0 = 0; p0 < P; p0 += chunk) {
        const int64_t n = std::min(chunk, P - p0);
        for (int64_t i = 0; i < n; ++i)
          for (int64_t c = 0; c < Cout; ++c) goutT[i * Cout + c] = go[c * P + p0 + i];
        if (wants_grad(w)) {
          im2col(g, x.data().data() + b * Cin * g.src_size(), col.data(), p0, p0 + n);
          kernels::matmul_tn_acc(col.data(), goutT.data(), gwt.data(), n, R, Cout);
        }
        if (wants_grad(x)) {
          kernels::matmul_nn(goutT.data(), w.data().data(), gcol.data(), n, Cout, R, false);
          col2im(g, gcol.data(), grad_of(x).data() + b * Cin * g.src_size(), p0, p0 + n);
        }
      }
      if (wants_grad(bias)) {
        auto gb = grad_of(bias);
        for (int64_t c = 0; c < Cout; ++c)
          for (int64_t p = 0; p < P; ++p) gb[c] += go[c * P + p];
      }
    }
    if (wants_grad(w)) {
      auto gw = grad_of(w);
      for (int64_t c = 0; c < Cout; ++c)
        for (int64_t r = 0; r < R; ++r) gw[c * R + r] += gwt[r * Cout + c];
    }
  });
  return res;
}

Tensor conv_transpose3d(const Tensor& x, const Tensor& w, const Tensor& bias, Int3 stride, Int3 pad,
                        Int3 out_pad) {
  check_5d(x, "conv_transpose3d");
  check_5d(w, "conv_transpose3d");
  const int64_t B = x.dim(0), Cin = x.dim(1), Cout = w.dim(1);
  if (w.dim(0) != Cin)
    throw std::invalid_argument("conv_transpose3d: weight " + shape_str(w.shape()) + " vs input " + shape_str(x.shape()));
  check_bias(bias, Cout, "conv_transpose3d");
  // Geometry of the forward conv whose adjoint this is: it slides over the
  // output volume and lands on the input grid.
  Geometry g;
  g.channels = Cout;
  g.k = {static_cast<int>(w.dim(2)), static_cast<int>(w.dim(3)), static_cast<int>(w.dim(4))};
  g.stride = stride;
  g.pad = pad;
  for (int a = 0; a < 3; ++a) {
    g.dst[a] = static_cast<int>(x.dim(2 + a));
    g.src[a] = (g.dst[a] - 1) * stride[a] - 2 * pad[a] + g.k[a] + out_pad[a];
    if (g.src[a] <= 0 || stride[a] < 1 || out_pad[a] < 0 || out_pad[a] >= stride[a])
      throw std::invalid_argument("conv_transpose3d: invalid geometry for input " + shape_str(x.shape()));
  }
  const int64_t P = g.dst_size(), R = g.row(), N = g.src_size();
  const int64_t chunk = std::min(P, kChunk);
  std::vector<Real> out(static_cast<size_t>(B * Cout * N), 0.0f);
  std::vector<Real> xT(static_cast<size_t>(chunk * Cin));
  std::vector<Real> col(static_cast<size_t>(chunk * R));
  for (int64_t b = 0; b < B; ++b) {
    const Real* xb = x.data().data() + b * Cin * P;
    Real* o = out.data() + b * Cout * N;
    for (int64_t p0 = 0; p0 < P; p0 += chunk) {
      const int64_t n = std::min(chunk, P - p0);
      for (int64_t i = 0; i < n; ++i)
        for (int64_t c = 0; c < Cin; ++c) xT[i * Cin + c] = xb[c * P + p0 + i];
      kernels::matmul_nn(xT.data(), w.data().data(), col.data(), n, Cin, R, false);
      col2im(g, col.data(), o, p0, p0 + n);
    }
    if (bias.defined())
      for (int64_t c = 0; c < Cout; ++c)
        for (int64_t p = 0; p < N; ++p) o[c * N + p] += bias.data()[c];
  }
  Tensor res = make_result({B, Cout, g.src[0], g.src[1], g.src[2]}, std::move(out), {x, w, bias});
  if (!res.requires_grad()) return res;
  active_graph()->record("conv_transpose3d", {x, w, bias}, res, [x, w, bias, res, g, B, Cin, Cout, P, R, N, chunk]() {
    const Real* gout = res.grad().data();
    std::vector<Real> gcol(static_cast<size_t>(chunk * R));
    std::vector<Real> xT(static_cast<size_t>(chunk * Cin));
    std::vector<Real> gxT(static_cast<size_t>(chunk * Cin));
    std::vector<Real> wt;
    if (wants_grad(x)) {
      wt.resize(static_cast<size_t>(R * Cin));
      kernels::transpose2d(w.data().data(), wt.data(), Cin, R);
    }
    for (int64_t b = 0; b < B; ++b) {
      const Real* go = gout + b * Cout * N;
      const Real* xb = x.data().data() + b * Cin * P;
      for (int64_t p0 = 0; p0 < P; p0 += chunk) {
        const int64_t n = std::min(chunk, P - p0);
        im2col(g, go, gcol.data(), p0, p0 + n);
        if (wants_grad(w)) {
          for (int64_t i = 0; i < n; ++i)
            for (int64_t c = 0; c < Cin; ++c) xT[i * Cin + c] = xb[c * P + p0 + i];
          kernels::matmul_tn_acc(xT.data(), gcol.data(), grad_of(w).data(), n, Cin, R);
        }
        if (wants_grad(x)) {
          kernels::matmul_nn(gcol.data(), wt.data(), gxT.data(), n, R, Cin, false);
          Real* gx = grad_of(x).data() + b * Cin * P;
          for (int64_t i = 0; i < n; ++i)
            for (int64_t c = 0; c < Cin; ++c) gx[c * P + p0 + i] += gxT[i * Cin + c];
        }
      }
      if (wants_grad(bias)) {
        auto gb = grad_of(bias);
        for (int64_t c = 0; c < Cout; ++c)
          for (int64_t p = 0; p < N; ++p) gb[c] += go[c * N + p];
      }
    }
  });
  return res;
}

}  // namespace mmt::ops
