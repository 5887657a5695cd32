#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <vector>

#include "mmt/rng.hpp"
#include "mmt/tensor.hpp"

// Differentiable primitives. Every op computes eagerly; when a Graph is
// active (see GraphScope) and an input requires grad, the op records its
// backward closure on that graph.
namespace mmt::ops {

// Elementwise binary ops. Shapes must match, or one operand's shape must be
// a trailing suffix of the other's (including a single-element tensor).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

Tensor scale(const Tensor& x, Real c);
Tensor add_scalar(const Tensor& x, Real c);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor pow(const Tensor& x, Real p);
Tensor sigmoid(const Tensor& x);
Tensor silu(const Tensor& x);
Tensor log_sigmoid(const Tensor& x);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor sum_axis(const Tensor& x, int axis, bool keepdim = false);
Tensor mean_axis(const Tensor& x, int axis, bool keepdim = false);
Tensor max_axis(const Tensor& x, int axis, bool keepdim = false);

// Over the last axis.
Tensor softmax(const Tensor& x);
Tensor log_softmax(const Tensor& x);

// [..., k] x [k, n] -> [..., n]
Tensor matmul(const Tensor& a, const Tensor& b);

// table [V, d], ids of any shape -> ids.shape + [d]
Tensor embedding(const Tensor& table, std::span<const int32_t> ids, const Shape& ids_shape);

Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor slice(const Tensor& x, int axis, int64_t start, int64_t length);
Tensor reshape(const Tensor& x, Shape shape);
Tensor permute(const Tensor& x, const std::vector<int>& perm);
Tensor transpose(const Tensor& x, int a, int b);

// Identity forward, no gradient.
Tensor detach(const Tensor& x);
// Forward value of `quantized`, gradient routed unchanged to `continuous`.
Tensor straight_through(const Tensor& continuous, const Tensor& quantized);

// Inverted dropout; identity when !train or p == 0.
Tensor dropout(const Tensor& x, Real p, bool train, Rng& rng);

using Int3 = std::array<int, 3>;

// x [B, Cin, T, H, W], w [Cout, Cin, kt, kh, kw], bias [Cout] or undefined.
Tensor conv3d(const Tensor& x, const Tensor& w, const Tensor& bias, Int3 stride, Int3 pad);
// x [B, Cin, T, H, W], w [Cin, Cout, kt, kh, kw]; output size per axis is
// (n - 1) * stride - 2 * pad + k + out_pad.
Tensor conv_transpose3d(const Tensor& x, const Tensor& w, const Tensor& bias, Int3 stride, Int3 pad,
                        Int3 out_pad);

// Fused blocks (forward and backward written by hand).
Tensor rmsnorm(const Tensor& x, const Tensor& gain, Real eps = 1e-6f);
// x [B, C, ...]; gamma, beta [C].
Tensor group_norm(const Tensor& x, int groups, const Tensor& gamma, const Tensor& beta, Real eps = 1e-5f);
// x [..., L, heads, head_dim] rotated at positions[l]; head_dim must be even.
Tensor rope(const Tensor& x, std::span<const int32_t> positions, double base);

// Per-row log softmax picked at the target: logits [N, V] -> [N].
Tensor gather_logprob(const Tensor& logits, std::span<const int32_t> targets);

struct AttentionMask {
  // For each row b and query position i the allowed keys are
  // [key_start[b * L + i], i]. Causal by construction.
  std::vector<int32_t> key_start;
};

// q [B, L, H, hd]; k, v [B, L, KVH, hd] with H % KVH == 0.
// Query head h reads key/value head h / (H / KVH).
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, const AttentionMask& mask,
                 Real dropout_p, bool train, Rng& rng);

// Eval-mode attention for one query position: q [H, hd] against cached
// keys/values laid out [positions, KVH, hd], reading positions
// [key_begin, key_end). Uses the same kernel as attention(), so results are
// bit-identical to the full-sequence path. Returns [H, hd].
std::vector<Real> attend_cached(std::span<const Real> q, std::span<const Real> keys, std::span<const Real> values, int64_t heads,
                                int64_t kv_heads, int64_t head_dim, int64_t key_begin, int64_t key_end);

// Eval-mode attention weights, dense [B, H, L, L] with zeros at masked keys.
std::vector<Real> attention_probs(const Tensor& q, const Tensor& k, const AttentionMask& mask);

}  // namespace mmt::ops
