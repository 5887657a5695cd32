#include <cmath>
#include <stdexcept>
#include <string>

#include "kernels.hpp"
#include "mmt/ops.hpp"

namespace mmt::ops {

using detail::grad_of;
using detail::make_result;
using detail::wants_grad;

Tensor rmsnorm(const Tensor& x, const Tensor& gain, Real eps) {
  const int64_t d = x.dim(-1);
  if (gain.ndim() != 1 || gain.dim(0) != d)
    throw std::invalid_argument("rmsnorm: gain " + shape_str(gain.shape()) + " vs input " + shape_str(x.shape()));
  const int64_t rows = x.numel() / d;
  const auto xv = x.data();
  const auto gv = gain.data();
  std::vector<Real> out(xv.size());
  std::vector<Real> inv(static_cast<size_t>(rows));
  for (int64_t r = 0; r < rows; ++r) {
    const Real* in = xv.data() + r * d;
    Real ss = 0.0f;
    for (int64_t j = 0; j < d; ++j) ss += in[j] * in[j];
    inv[r] = 1.0f / std::sqrt(ss / static_cast<Real>(d) + eps);
    for (int64_t j = 0; j < d; ++j) out[r * d + j] = in[j] * inv[r] * gv[j];
  }
  Tensor res = make_result(x.shape(), std::move(out), {x, gain});
  if (!res.requires_grad()) return res;
  active_graph()->record("rmsnorm", {x, gain}, res, [x, gain, res, d, rows, inv = std::move(inv)]() {
    const auto g = res.grad();
    const auto xv = x.data();
    const auto gv = gain.data();
    if (wants_grad(gain)) {
      auto gg = grad_of(gain);
      for (int64_t r = 0; r < rows; ++r)
        for (int64_t j = 0; j < d; ++j) gg[j] += g[r * d + j] * xv[r * d + j] * inv[r];
    }
    if (wants_grad(x)) {
      auto gx = grad_of(x);
      for (int64_t r = 0; r < rows; ++r) {
        Real dot = 0.0f;
        for (int64_t j = 0; j < d; ++j) dot += g[r * d + j] * gv[j] * xv[r * d + j];
        const Real c = inv[r] * inv[r] * inv[r] * dot / static_cast<Real>(d);
        for (int64_t j = 0; j < d; ++j) gx[r * d + j] += inv[r] * gv[j] * g[r * d + j] - xv[r * d + j] * c;
      }
    }
  });
  return res;
}

Tensor group_norm(const Tensor& x, int groups, const Tensor& gamma, const Tensor& beta, Real eps) {
  if (x.ndim() < 2) throw std::invalid_argument("group_norm: input needs a channel axis");
  const int64_t B = x.dim(0), C = x.dim(1);
  if (groups <= 0 || C % groups != 0)
    throw std::invalid_argument("group_norm: " + std::to_string(C) + " channels not divisible into " + std::to_string(groups) + " groups");
  if (gamma.numel() != C || beta.numel() != C) throw std::invalid_argument("group_norm: affine parameter size mismatch");
  const int64_t S = x.numel() / (B * C);
  const int64_t cpg = C / groups;
  const int64_t n = cpg * S;
  const auto xv = x.data();
  std::vector<Real> xhat(xv.size());
  std::vector<Real> inv_std(static_cast<size_t>(B * groups));
  std::vector<Real> out(xv.size());
  for (int64_t b = 0; b < B; ++b)
    for (int64_t gi = 0; gi < groups; ++gi) {
      const int64_t base = (b * C + gi * cpg) * S;
      double mu = 0.0;
      for (int64_t e = 0; e < n; ++e) mu += xv[base + e];
      mu /= static_cast<double>(n);
      double var = 0.0;
      for (int64_t e = 0; e < n; ++e) var += (xv[base + e] - mu) * (xv[base + e] - mu);
      var /= static_cast<double>(n);
      const Real is = static_cast<Real>(1.0 / std::sqrt(var + eps));
      inv_std[b * groups + gi] = is;
      for (int64_t e = 0; e < n; ++e) {
        const int64_t c = gi * cpg + e / S;
        xhat[base + e] = static_cast<Real>(xv[base + e] - mu) * is;
        out[base + e] = xhat[base + e] * gamma.data()[c] + beta.data()[c];
      }
    }
  Tensor res = make_result(x.shape(), std::move(out), {x, gamma, beta});
  if (!res.requires_grad()) return res;
  active_graph()->record("group_norm", {x, gamma, beta}, res,
                         [x, gamma, beta, res, B, C, S, cpg, n, groups, xhat = std::move(xhat),
                          inv_std = std::move(inv_std)]() {
                           const auto g = res.grad();
                           const auto gm = gamma.data();
                           if (wants_grad(gamma) || wants_grad(beta)) {
                             std::vector<Real> dg(C, 0.0f), db(C, 0.0f);
                             for (int64_t b = 0; b < B; ++b)
                               for (int64_t c = 0; c < C; ++c)
                                 for (int64_t s = 0; s < S; ++s) {
                                   const int64_t i = (b * C + c) * S + s;
                                   dg[c] += g[i] * xhat[i];
                                   db[c] += g[i];
                                 }
                             if (wants_grad(gamma)) {
                               auto gg = grad_of(gamma);
                               for (int64_t c = 0; c < C; ++c) gg[c] += dg[c];
                             }
                             if (wants_grad(beta)) {
                               auto gb = grad_of(beta);
                               for (int64_t c = 0; c < C; ++c) gb[c] += db[c];
                             }
                           }
                           if (!wants_grad(x)) return;
                           auto gx = grad_of(x);
                           for (int64_t b = 0; b < B; ++b)
                             for (int64_t gi = 0; gi < groups; ++gi) {
                               const int64_t base = (b * C + gi * cpg) * S;
                               Real sum_d = 0.0f, sum_dx = 0.0f;
                               for (int64_t e = 0; e < n; ++e) {
                                 const Real dxh = g[base + e] * gm[gi * cpg + e / S];
                                 sum_d += dxh;
                                 sum_dx += dxh * xhat[base + e];
                               }
                               const Real is = inv_std[b * groups + gi];
                               const Real nf = static_cast<Real>(n);
                               for (int64_t e = 0; e < n; ++e) {
                                 const Real dxh = g[base + e] * gm[gi * cpg + e / S];
                                 gx[base + e] += is / nf * (nf * dxh - sum_d - xhat[base + e] * sum_dx);
                               }
                             }
                         });
  return res;
}

namespace {

struct RopeTable {
  std::vector<Real> cos, sin;  // [L, hd/2]
};

RopeTable rope_table(std::span<const int32_t> positions, int64_t half, int64_t hd, double base) {
  RopeTable t;
  t.cos.resize(positions.size() * half);
  t.sin.resize(positions.size() * half);
  for (size_t l = 0; l < positions.size(); ++l)
    for (int64_t i = 0; i < half; ++i) {
      const double freq = std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(hd));
      const double angle = static_cast<double>(positions[l]) * freq;
      t.cos[l * half + i] = static_cast<Real>(std::cos(angle));
      t.sin[l * half + i] = static_cast<Real>(std::sin(angle));
    }
  return t;
}

}  // namespace

Tensor rope(const Tensor& x, std::span<const int32_t> positions, double base) {
  if (x.ndim() < 3) throw std::invalid_argument("rope: expected [..., L, heads, head_dim], got " + shape_str(x.shape()));
  const int64_t hd = x.dim(-1), H = x.dim(-2), L = x.dim(-3);
  if (hd % 2 != 0) throw std::invalid_argument("rope: head dim " + std::to_string(hd) + " is odd");
  if (static_cast<int64_t>(positions.size()) != L) throw std::invalid_argument("rope: positions length mismatch");
  if (!(base > 0.0)) throw std::invalid_argument("rope: base must be positive");
  const int64_t half = hd / 2;
  const int64_t outer = x.numel() / (L * H * hd);
  RopeTable t = rope_table(positions, half, hd, base);
  const auto xv = x.data();
  std::vector<Real> out(xv.size());
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t l = 0; l < L; ++l)
      for (int64_t h = 0; h < H; ++h) {
        const int64_t off = ((o * L + l) * H + h) * hd;
        for (int64_t i = 0; i < half; ++i) {
          const Real c = t.cos[l * half + i], s = t.sin[l * half + i];
          const Real a = xv[off + i], b = xv[off + i + half];
          out[off + i] = a * c - b * s;
          out[off + i + half] = a * s + b * c;
        }
      }
  Tensor res = make_result(x.shape(), std::move(out), {x});
  if (!res.requires_grad()) return res;
  active_graph()->record("rope", {x}, res, [x, res, outer, L, H, hd, half, t = std::move(t)]() {
    const auto g = res.grad();
    auto gx = grad_of(x);
    for (int64_t o = 0; o < outer; ++o)
      for (int64_t l = 0; l < L; ++l)
        for (int64_t h = 0; h < H; ++h) {
          const int64_t off = ((o * L + l) * H + h) * hd;
          for (int64_t i = 0; i < half; ++i) {
            const Real c = t.cos[l * half + i], s = t.sin[l * half + i];
            const Real ga = g[off + i], gb = g[off + i + half];
            gx[off + i] += ga * c + gb * s;
            gx[off + i + half] += -ga * s + gb * c;
          }
        }
  });
  return res;
}

Tensor gather_logprob(const Tensor& logits, std::span<const int32_t> targets) {
  if (logits.ndim() != 2) throw std::invalid_argument("gather_logprob: logits must be [N, V]");
  const int64_t N = logits.dim(0), V = logits.dim(1);
  if (static_cast<int64_t>(targets.size()) != N)
    throw std::invalid_argument("gather_logprob: " + std::to_string(targets.size()) + " targets for " + std::to_string(N) + " rows");
  std::vector<int32_t> tg(targets.begin(), targets.end());
  const auto lv = logits.data();
  std::vector<Real> out(static_cast<size_t>(N));
  std::vector<Real> lse(static_cast<size_t>(N));
  for (int64_t r = 0; r < N; ++r) {
    if (tg[r] < 0 || tg[r] >= V) throw std::out_of_range("gather_logprob: target " + std::to_string(tg[r]) + " out of range");
    const Real* row = lv.data() + r * V;
    Real mx = row[0];
    for (int64_t j = 1; j < V; ++j) mx = std::max(mx, row[j]);
    Real total = 0.0f;
    for (int64_t j = 0; j < V; ++j) total += std::exp(row[j] - mx);
    lse[r] = mx + std::log(total);
    out[r] = row[tg[r]] - lse[r];
  }
  Tensor res = make_result({N}, std::move(out), {logits});
  if (!res.requires_grad()) return res;
  active_graph()->record("gather_logprob", {logits}, res, [logits, res, N, V, tg = std::move(tg), lse = std::move(lse)]() {
    const auto g = res.grad();
    const auto lv = logits.data();
    auto gl = grad_of(logits);
    for (int64_t r = 0; r < N; ++r) {
      if (g[r] == 0.0f) continue;
      const Real* row = lv.data() + r * V;
      Real* grow = gl.data() + r * V;
      for (int64_t j = 0; j < V; ++j) grow[j] -= g[r] * std::exp(row[j] - lse[r]);
      grow[tg[r]] += g[r];
    }
  });
  return res;
}

namespace {

struct AttnDims {
  int64_t B, L, H, KVH, hd, group;
};

AttnDims check_attention(const Tensor& q, const Tensor& k, const AttentionMask& mask) {
  if (q.ndim() != 4 || k.ndim() != 4) throw std::invalid_argument("attention: expected 4-D q and k");
  AttnDims d{q.dim(0), q.dim(1), q.dim(2), k.dim(2), q.dim(3), 0};
  if (k.dim(0) != d.B || k.dim(1) != d.L || k.dim(3) != d.hd)
    throw std::invalid_argument("attention: q " + shape_str(q.shape()) + " vs k " + shape_str(k.shape()));
  if (d.KVH <= 0 || d.H % d.KVH != 0)
    throw std::invalid_argument("attention: " + std::to_string(d.KVH) + " kv heads do not divide " + std::to_string(d.H) + " heads");
  d.group = d.H / d.KVH;
  if (static_cast<int64_t>(mask.key_start.size()) != d.B * d.L)
    throw std::invalid_argument("attention: mask covers " + std::to_string(mask.key_start.size()) + " positions, expected " +
                                std::to_string(d.B * d.L));
  for (int64_t b = 0; b < d.B; ++b)
    for (int64_t i = 0; i < d.L; ++i) {
      const int32_t s = mask.key_start[b * d.L + i];
      if (s < 0 || s > i) throw std::out_of_range("attention: key start " + std::to_string(s) + " invalid at position " + std::to_string(i));
    }
  return d;
}

}  // namespace

std::vector<Real> attend_cached(std::span<const Real> q, std::span<const Real> keys, std::span<const Real> values, int64_t H,
                                int64_t KVH, int64_t hd, int64_t key_begin, int64_t key_end) {
  if (KVH <= 0 || H % KVH != 0) throw std::invalid_argument("attend_cached: heads must be a multiple of kv heads");
  if (static_cast<int64_t>(q.size()) != H * hd) throw std::invalid_argument("attend_cached: query size mismatch");
  const int64_t kstride = KVH * hd;
  if (key_begin < 0 || key_end <= key_begin || key_end * kstride > static_cast<int64_t>(keys.size()) || keys.size() != values.size())
    throw std::invalid_argument("attend_cached: key range outside cache");
  const Real scale = 1.0f / std::sqrt(static_cast<Real>(hd));
  const int64_t group = H / KVH;
  std::vector<Real> probs(static_cast<size_t>(key_end - key_begin));
  std::vector<Real> out(static_cast<size_t>(H * hd));
  for (int64_t h = 0; h < H; ++h) {
    const int64_t kvh = h / group;
    kernels::attend_query(q.data() + h * hd, keys.data() + kvh * hd, values.data() + kvh * hd, kstride, key_begin, key_end, hd, scale,
                          probs.data(), out.data() + h * hd);
  }
  return out;
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, const AttentionMask& mask, Real dropout_p,
                 bool train, Rng& rng) {
  const AttnDims d = check_attention(q, k, mask);
  if (v.shape() != k.shape()) throw std::invalid_argument("attention: v shape differs from k");
  const bool drop = train && dropout_p > 0.0f;
  if (drop && dropout_p >= 1.0f) throw std::invalid_argument("attention: dropout rate must be < 1");
  const Real scale = 1.0f / std::sqrt(static_cast<Real>(d.hd));
  const Real keep_scale = drop ? 1.0f / (1.0f - dropout_p) : 1.0f;

  // probs for query (b, i) and head h live at h * total + offset[b * L + i].
  std::vector<int64_t> offset(static_cast<size_t>(d.B * d.L));
  int64_t total = 0;
  for (int64_t p = 0; p < d.B * d.L; ++p) {
    offset[p] = total;
    total += p % d.L - mask.key_start[p] + 1;
  }
  std::vector<Real> probs(static_cast<size_t>(d.H * total));
  std::vector<Real> keep;
  if (drop) keep.resize(probs.size());
  std::vector<Real> out(static_cast<size_t>(q.numel()));
  const Real* qv = q.data().data();
  const Real* kv = k.data().data();
  const Real* vv = v.data().data();
  const int64_t kstride = d.KVH * d.hd;
  for (int64_t b = 0; b < d.B; ++b)
    for (int64_t i = 0; i < d.L; ++i) {
      const int64_t pos = b * d.L + i;
      const int64_t start = mask.key_start[pos];
      const int64_t nk = i - start + 1;
      for (int64_t h = 0; h < d.H; ++h) {
        const int64_t kvh = h / d.group;
        const Real* keys = kv + b * d.L * kstride + kvh * d.hd;
        const Real* vals = vv + b * d.L * kstride + kvh * d.hd;
        Real* pr = probs.data() + h * total + offset[pos];
        Real* o = out.data() + (pos * d.H + h) * d.hd;
        kernels::attend_query(qv + (pos * d.H + h) * d.hd, keys, vals, kstride, start, i + 1, d.hd, scale, pr, o);
        if (drop) {
          Real* kp = keep.data() + h * total + offset[pos];
          std::fill(o, o + d.hd, 0.0f);
          for (int64_t j = 0; j < nk; ++j) {
            kp[j] = rng.uniform() >= dropout_p ? keep_scale : 0.0f;
            const Real w = pr[j] * kp[j];
            const Real* vr = vals + (start + j) * kstride;
            for (int64_t e = 0; e < d.hd; ++e) o[e] += w * vr[e];
          }
        }
      }
    }
  Tensor res = make_result(q.shape(), std::move(out), {q, k, v});
  if (!res.requires_grad()) return res;
  active_graph()->record("attention", {q, k, v}, res,
                         [q, k, v, res, d, mask, scale, total, offset = std::move(offset), probs = std::move(probs),
                          keep = std::move(keep)]() {
                           const Real* g = res.grad().data();
                           const Real* qv = q.data().data();
                           const Real* kv = k.data().data();
                           const Real* vv = v.data().data();
                           std::vector<Real> gq(static_cast<size_t>(q.numel()), 0.0f);
                           std::vector<Real> gk(static_cast<size_t>(k.numel()), 0.0f);
                           std::vector<Real> gv(static_cast<size_t>(v.numel()), 0.0f);
                           const int64_t kstride = d.KVH * d.hd;
                           std::vector<Real> dp;
                           for (int64_t b = 0; b < d.B; ++b)
                             for (int64_t i = 0; i < d.L; ++i) {
                               const int64_t pos = b * d.L + i;
                               const int64_t start = mask.key_start[pos];
                               const int64_t nk = i - start + 1;
                               dp.resize(static_cast<size_t>(nk));
                               for (int64_t h = 0; h < d.H; ++h) {
                                 const int64_t kvh = h / d.group;
                                 const int64_t kbase = b * d.L * kstride + kvh * d.hd;
                                 const Real* pr = probs.data() + h * total + offset[pos];
                                 const Real* kp = keep.empty() ? nullptr : keep.data() + h * total + offset[pos];
                                 const Real* go = g + (pos * d.H + h) * d.hd;
                                 Real acc = 0.0f;
                                 for (int64_t j = 0; j < nk; ++j) {
                                   const int64_t kr = kbase + (start + j) * kstride;
                                   const Real m = kp ? kp[j] : 1.0f;
                                   const Real dpd = kernels::dot(go, vv + kr, d.hd);
                                   const Real w = pr[j] * m;
                                   for (int64_t e = 0; e < d.hd; ++e) gv[kr + e] += w * go[e];
                                   dp[j] = dpd * m;
                                   acc += pr[j] * dp[j];
                                 }
                                 const int64_t qoff = (pos * d.H + h) * d.hd;
                                 for (int64_t j = 0; j < nk; ++j) {
                                   const int64_t kr = kbase + (start + j) * kstride;
                                   const Real ds = pr[j] * (dp[j] - acc) * scale;
                                   for (int64_t e = 0; e < d.hd; ++e) {
                                     gq[qoff + e] += ds * kv[kr + e];
                                     gk[kr + e] += ds * qv[qoff + e];
                                   }
                                 }
                               }
                             }
                           auto add_to = [](const Tensor& t, const std::vector<Real>& src) {
                             if (!wants_grad(t)) return;
                             auto gt = grad_of(t);
                             for (size_t e = 0; e < src.size(); ++e) gt[e] += src[e];
                           };
                           add_to(q, gq);
                           add_to(k, gk);
                           add_to(v, gv);
                         });
  return res;
}

std::vector<Real> attention_probs(const Tensor& q, const Tensor& k, const AttentionMask& mask) {
  const AttnDims d = check_attention(q, k, mask);
  const Real scale = 1.0f / std::sqrt(static_cast<Real>(d.hd));
  std::vector<Real> dense(static_cast<size_t>(d.B * d.H * d.L * d.L), 0.0f);
  std::vector<Real> scratch(static_cast<size_t>(d.L)), out(static_cast<size_t>(d.hd));
  const int64_t kstride = d.KVH * d.hd;
  for (int64_t b = 0; b < d.B; ++b)
    for (int64_t i = 0; i < d.L; ++i) {
      const int64_t pos = b * d.L + i;
      const int64_t start = mask.key_start[pos];
      for (int64_t h = 0; h < d.H; ++h) {
        const Real* keys = k.data().data() + b * d.L * kstride + (h / d.group) * d.hd;
        // values are not needed; reuse keys so the kernel has a valid pointer
        kernels::attend_query(q.data().data() + (pos * d.H + h) * d.hd, keys, keys, kstride, start, i + 1, d.hd, scale,
                              scratch.data(), out.data());
        Real* row = dense.data() + ((b * d.H + h) * d.L + i) * d.L;
        for (int64_t j = start; j <= i; ++j) row[j] = scratch[j - start];
      }
    }
  return dense;
}

}  // namespace mmt::ops
