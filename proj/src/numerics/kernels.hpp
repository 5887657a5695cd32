#pragma once

// Shared inner loops. Full-sequence and incremental (cached) paths call the
// same routines so both produce bit-identical results.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>

#include "mmt/tensor.hpp"

namespace mmt::kernels {

// c[m, n] (+)= a[m, k] * b[k, n]; per-element reduction order is k ascending.
inline void matmul_nn(const Real* a, const Real* b, Real* c, int64_t m, int64_t k, int64_t n,
                      bool accumulate) {
  if (!accumulate) std::fill(c, c + m * n, 0.0f);
  for (int64_t i = 0; i < m; ++i) {
    Real* crow = c + i * n;
    const Real* arow = a + i * k;
    for (int64_t kk = 0; kk < k; ++kk) {
      const Real av = arow[kk];
      const Real* brow = b + kk * n;
      for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// c[k, n] += a[m, k]^T * g[m, n]
inline void matmul_tn_acc(const Real* a, const Real* g, Real* c, int64_t m, int64_t k, int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    const Real* arow = a + i * k;
    const Real* grow = g + i * n;
    for (int64_t kk = 0; kk < k; ++kk) {
      const Real av = arow[kk];
      if (av == 0.0f) continue;
      Real* crow = c + kk * n;
      for (int64_t j = 0; j < n; ++j) crow[j] += av * grow[j];
    }
  }
}

inline void transpose2d(const Real* src, Real* dst, int64_t rows, int64_t cols) {
  for (int64_t r = 0; r < rows; ++r)
    for (int64_t c = 0; c < cols; ++c) dst[c * rows + r] = src[r * cols + c];
}

inline Real dot(const Real* a, const Real* b, int64_t n) {
  Real s = 0.0f;
  for (int64_t i = 0; i < n; ++i) s += a[i] * b[i];
  return s;
}

// One query against keys/values [key_begin, key_end) of a row laid out with
// `key_stride` floats between consecutive positions. Writes softmax weights
// for those keys into `probs` and the weighted value sum into `out`.
inline void attend_query(const Real* q, const Real* keys, const Real* vals, int64_t key_stride,
                         int64_t key_begin, int64_t key_end, int64_t head_dim, Real scale,
                         Real* probs, Real* out) {
  const int64_t n = key_end - key_begin;
  Real mx = -std::numeric_limits<Real>::infinity();
  for (int64_t j = 0; j < n; ++j) {
    const Real s = dot(q, keys + (key_begin + j) * key_stride, head_dim) * scale;
    probs[j] = s;
    mx = std::max(mx, s);
  }
  Real total = 0.0f;
  for (int64_t j = 0; j < n; ++j) {
    probs[j] = std::exp(probs[j] - mx);
    total += probs[j];
  }
  const Real inv = 1.0f / total;
  for (int64_t j = 0; j < n; ++j) probs[j] *= inv;
  std::fill(out, out + head_dim, 0.0f);
  for (int64_t j = 0; j < n; ++j) {
    const Real p = probs[j];
    const Real* v = vals + (key_begin + j) * key_stride;
    for (int64_t d = 0; d < head_dim; ++d) out[d] += p * v[d];
  }
}

}  // namespace mmt::kernels
