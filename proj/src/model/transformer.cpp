#include "mmt/model/transformer.hpp"

#include <cmath>
#include <set>
#include <stdexcept>

#include "mmt/ops.hpp"

namespace mmt::model {

int64_t ModelConfig::parameter_count() const {
  const int64_t D = hidden, I = intermediate, kv = int64_t{kv_heads} * head_dim();
  const int64_t per_layer = 2 * D + D * D + 2 * D * kv + D * D + 3 * D * I;
  return 2 * int64_t{vocab} * D + D + layers * per_layer;
}

void ModelConfig::validate() const {
  if (vocab < 1 || layers < 1 || hidden < 1 || intermediate < 1 || heads < 1 || kv_heads < 1 || max_context < 1)
    throw std::invalid_argument("model config: sizes must be positive");
  if (heads % kv_heads != 0) throw std::invalid_argument("model config: heads must be divisible by kv_heads");
  if (hidden % heads != 0) throw std::invalid_argument("model config: hidden must be divisible by heads");
  if (head_dim() % 2 != 0) throw std::invalid_argument("model config: head dim must be even for rotary embeddings");
  if (!(rope_base > 0)) throw std::invalid_argument("model config: rope_base must be positive");
  if (!(dropout >= 0 && dropout < 1)) throw std::invalid_argument("model config: dropout must be in [0, 1)");
}

nlohmann::json config_to_json(const ModelConfig& c) {
  return {{"vocab", c.vocab},       {"layers", c.layers},       {"hidden", c.hidden},
          {"intermediate", c.intermediate}, {"heads", c.heads}, {"kv_heads", c.kv_heads},
          {"rope_base", c.rope_base}, {"max_context", c.max_context}, {"dropout", c.dropout}};
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw std::invalid_argument("model config must be a JSON object");
  static const std::set<std::string> known{"vocab", "layers", "hidden", "intermediate", "heads", "kv_heads", "rope_base", "max_context", "dropout"};
  for (const auto& [k, v] : j.items())
    if (!known.count(k)) throw std::invalid_argument("unknown model config key '" + k + "'");
  ModelConfig c;
  c.vocab = j.value("vocab", c.vocab);
  c.layers = j.value("layers", c.layers);
  c.hidden = j.value("hidden", c.hidden);
  c.intermediate = j.value("intermediate", c.intermediate);
  c.heads = j.value("heads", c.heads);
  c.kv_heads = j.value("kv_heads", c.kv_heads);
  c.rope_base = j.value("rope_base", c.rope_base);
  c.max_context = j.value("max_context", c.max_context);
  c.dropout = j.value("dropout", c.dropout);
  c.validate();
  return c;
}

Tensor Transformer::make(const std::string& name, Shape shape, double stddev, Rng& rng) {
  std::vector<Real> v(static_cast<size_t>(shape_numel(shape)));
  if (stddev == 0) {
    std::fill(v.begin(), v.end(), Real(1));
  } else {
    for (auto& x : v) x = static_cast<Real>(rng.normal() * stddev);
  }
  Tensor t = Tensor::from(std::move(shape), std::move(v), true);
  params_.emplace_back(name, t);
  return t;
}

Transformer::Transformer(ModelConfig config, uint64_t seed) : config_(config) {
  config_.validate();
  Rng rng(seed);
  const int64_t D = config_.hidden, I = config_.intermediate, hd = config_.head_dim();
  const int64_t qdim = int64_t{config_.heads} * hd, kvdim = int64_t{config_.kv_heads} * hd;
  const double base = 0.02, resid = 0.02 / std::sqrt(2.0 * config_.layers);
  embed_ = make("embed", {config_.vocab, D}, base, rng);
  for (int i = 0; i < config_.layers; ++i) {
    const std::string p = "layers." + std::to_string(i) + ".";
    Layer l;
    l.attn_norm = make(p + "attn_norm", {D}, 0, rng);
    l.wq = make(p + "attn.wq", {D, qdim}, base, rng);
    l.wk = make(p + "attn.wk", {D, kvdim}, base, rng);
    l.wv = make(p + "attn.wv", {D, kvdim}, base, rng);
    l.wo = make(p + "attn.wo", {qdim, D}, resid, rng);
    l.mlp_norm = make(p + "mlp_norm", {D}, 0, rng);
    l.w_gate = make(p + "mlp.w_gate", {D, I}, base, rng);
    l.w_up = make(p + "mlp.w_up", {D, I}, base, rng);
    l.w_down = make(p + "mlp.w_down", {I, D}, resid, rng);
    layers_.push_back(l);
  }
  final_norm_ = make("final_norm", {D}, 0, rng);
  lm_head_ = make("lm_head", {D, config_.vocab}, base, rng);
}

// h is [B * L, D]; positions has one entry per flattened token.
Tensor Transformer::block(const Layer& l, const Tensor& h, int64_t B, int64_t L, std::span<const int32_t> positions,
                          const std::vector<int32_t>& key_start, bool train, Rng* rng) const {
  const int64_t H = config_.heads, KVH = config_.kv_heads, hd = config_.head_dim();
  const Real p = static_cast<Real>(config_.dropout);
  Tensor x = ops::rmsnorm(h, l.attn_norm);
  Tensor q = ops::rope(ops::reshape(ops::matmul(x, l.wq), {B * L, H, hd}), positions, config_.rope_base);
  Tensor k = ops::rope(ops::reshape(ops::matmul(x, l.wk), {B * L, KVH, hd}), positions, config_.rope_base);
  Tensor v = ops::matmul(x, l.wv);
  Rng unused(0);
  Rng& r = rng ? *rng : unused;
  Tensor a = ops::attention(ops::reshape(q, {B, L, H, hd}), ops::reshape(k, {B, L, KVH, hd}), ops::reshape(v, {B, L, KVH, hd}),
                            ops::AttentionMask{key_start}, p, train, r);
  Tensor out = ops::add(h, ops::matmul(ops::reshape(a, {B * L, H * hd}), l.wo));
  Tensor y = ops::rmsnorm(out, l.mlp_norm);
  Tensor m = ops::matmul(ops::mul(ops::silu(ops::matmul(y, l.w_gate)), ops::matmul(y, l.w_up)), l.w_down);
  return ops::add(out, ops::dropout(m, p, train, r));
}

Tensor Transformer::forward(std::span<const int32_t> ids, int64_t B, int64_t L, std::span<const int32_t> key_start, bool train,
                            Rng* rng) const {
  if (B < 1 || L < 1 || static_cast<int64_t>(ids.size()) != B * L)
    throw std::invalid_argument("forward: ids length " + std::to_string(ids.size()) + " does not match batch x length");
  if (L > config_.max_context)
    throw std::invalid_argument("forward: sequence length " + std::to_string(L) + " exceeds context " + std::to_string(config_.max_context));
  for (int32_t id : ids)
    if (id < 0 || id >= config_.vocab) throw std::out_of_range("forward: token id " + std::to_string(id) + " outside vocabulary");
  if (train && config_.dropout > 0 && !rng) throw std::invalid_argument("forward: training with dropout needs an rng");
  std::vector<int32_t> ks(static_cast<size_t>(B * L), 0);
  if (!key_start.empty()) {
    if (static_cast<int64_t>(key_start.size()) != B * L) throw std::invalid_argument("forward: key_start length mismatch");
    for (int64_t i = 0; i < B * L; ++i) {
      if (key_start[i] < 0 || key_start[i] > i % L) throw std::out_of_range("forward: boundary offset out of range at " + std::to_string(i));
      ks[i] = key_start[i];
    }
  }
  std::vector<int32_t> pos(static_cast<size_t>(B * L));
  for (int64_t i = 0; i < B * L; ++i) pos[i] = static_cast<int32_t>(i % L - ks[i]);

  Tensor h = ops::embedding(embed_, ids, {B * L});
  for (const auto& l : layers_) h = block(l, h, B, L, pos, ks, train, rng);
  return ops::reshape(ops::matmul(ops::rmsnorm(h, final_norm_), lm_head_), {B, L, config_.vocab});
}

KvCache Transformer::new_cache() const {
  KvCache c;
  c.keys.resize(layers_.size());
  c.values.resize(layers_.size());
  return c;
}

std::vector<Real> Transformer::step(KvCache& cache, int32_t id) const {
  if (id < 0 || id >= config_.vocab) throw std::out_of_range("step: token id " + std::to_string(id) + " outside vocabulary");
  if (cache.length >= config_.max_context) throw std::length_error("step: context of " + std::to_string(config_.max_context) + " is full");
  if (cache.keys.size() != layers_.size()) throw std::invalid_argument("step: cache does not belong to this model");
  const int64_t H = config_.heads, KVH = config_.kv_heads, hd = config_.head_dim();
  const int32_t position = static_cast<int32_t>(cache.length);
  const std::vector<int32_t> pos{position};
  const int32_t one[1] = {id};
  Tensor h = ops::embedding(embed_, one, {1});
  for (size_t li = 0; li < layers_.size(); ++li) {
    const Layer& l = layers_[li];
    Tensor x = ops::rmsnorm(h, l.attn_norm);
    Tensor q = ops::rope(ops::reshape(ops::matmul(x, l.wq), {1, H, hd}), pos, config_.rope_base);
    Tensor k = ops::rope(ops::reshape(ops::matmul(x, l.wk), {1, KVH, hd}), pos, config_.rope_base);
    Tensor v = ops::matmul(x, l.wv);
    auto& kc = cache.keys[li];
    auto& vc = cache.values[li];
    kc.insert(kc.end(), k.values().begin(), k.values().end());
    vc.insert(vc.end(), v.values().begin(), v.values().end());
    auto a = ops::attend_cached(q.values(), kc, vc, H, KVH, hd, 0, cache.length + 1);
    Tensor out = ops::add(h, ops::matmul(Tensor::from({1, H * hd}, std::move(a)), l.wo));
    Tensor y = ops::rmsnorm(out, l.mlp_norm);
    h = ops::add(out, ops::matmul(ops::mul(ops::silu(ops::matmul(y, l.w_gate)), ops::matmul(y, l.w_up)), l.w_down));
  }
  ++cache.length;
  return ops::matmul(ops::rmsnorm(h, final_norm_), lm_head_).values();
}

std::vector<Real> Transformer::prefill(KvCache& cache, std::span<const int32_t> ids) const {
  if (ids.empty()) throw std::invalid_argument("prefill: no tokens");
  std::vector<Real> logits;
  for (int32_t id : ids) logits = step(cache, id);
  return logits;
}

Transformer Transformer::clone() const {
  Transformer t(config_);
  t.copy_from(*this);
  return t;
}

void Transformer::copy_from(const Transformer& other) {
  if (!(other.config_ == config_)) throw std::invalid_argument("copy_from: config mismatch");
  for (size_t i = 0; i < params_.size(); ++i) {
    Tensor dst = params_[i].second;
    const auto src = other.params_[i].second.data();
    std::copy(src.begin(), src.end(), dst.mutable_data().begin());
  }
}

}  // namespace mmt::model
