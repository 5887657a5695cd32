#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "mmt/optim.hpp"
#include "mmt/rng.hpp"
#include "mmt/tensor.hpp"

namespace mmt::model {

struct ModelConfig {
  int vocab = 328;
  int layers = 2;
  int hidden = 64;
  int intermediate = 128;
  int heads = 4;
  int kv_heads = 2;
  double rope_base = 1e6;
  int max_context = 512;
  double dropout = 0.1;

  static ModelConfig desk() { return {}; }
  static ModelConfig large() { return {184622, 32, 4096, 14336, 32, 8, 1e6, 131072, 0.1}; }
  int head_dim() const { return hidden / heads; }
  int64_t parameter_count() const;
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

nlohmann::json config_to_json(const ModelConfig& c);
// Missing keys keep defaults; unknown keys are rejected.
ModelConfig model_config_from_json(const nlohmann::json& j);

// Incremental decoding state: per-layer keys and values [capacity, KVH, hd].
struct KvCache {
  int64_t length = 0;
  std::vector<std::vector<Real>> keys, values;
};

// Decoder-only transformer: pre-norm RMSNorm blocks with grouped-query
// attention, SwiGLU feed-forward, rotary embeddings and an untied output head.
// No projection carries a bias.
class Transformer {
 public:
  explicit Transformer(ModelConfig config, uint64_t seed = 0);
  // Parameters are shared handles, so copies would alias; use clone().
  Transformer(const Transformer&) = delete;
  Transformer& operator=(const Transformer&) = delete;
  Transformer(Transformer&&) = default;
  Transformer& operator=(Transformer&&) = default;
  Transformer clone() const;

  const ModelConfig& config() const { return config_; }
  const NamedParams& parameters() const { return params_; }

  // ids [B * L] row-major. key_start [B * L] gives the first key each
  // position may attend to (document start in a packed row); empty means
  // plain causal from 0. RoPE positions count from each position's key start.
  // Returns logits [B, L, vocab]. Dropout is active only when train is set.
  Tensor forward(std::span<const int32_t> ids, int64_t batch, int64_t length, std::span<const int32_t> key_start, bool train,
                 Rng* rng) const;

  KvCache new_cache() const;
  // Appends one token (eval mode) and returns the next-token logits [vocab].
  // Bit-identical to the matching row of forward() on the whole prefix.
  std::vector<Real> step(KvCache& cache, int32_t id) const;
  // Feeds several tokens; returns logits after the last one.
  std::vector<Real> prefill(KvCache& cache, std::span<const int32_t> ids) const;

  // Copies parameter values from another model with the same config.
  void copy_from(const Transformer& other);

 private:
  struct Layer {
    Tensor attn_norm, wq, wk, wv, wo, mlp_norm, w_gate, w_up, w_down;
  };
  Tensor make(const std::string& name, Shape shape, double stddev, Rng& rng);
  Tensor block(const Layer& l, const Tensor& h, int64_t B, int64_t L, std::span<const int32_t> positions,
               const std::vector<int32_t>& key_start, bool train, Rng* rng) const;

  ModelConfig config_;
  NamedParams params_;
  Tensor embed_, final_norm_, lm_head_;
  std::vector<Layer> layers_;
};

}  // namespace mmt::model
