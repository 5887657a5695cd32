#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "mmt/optim.hpp"
#include "mmt/rng.hpp"
#include "mmt/tensor.hpp"
#include "mmt/vq/media.hpp"

namespace mmt::vq {

struct TokenizerConfig {
  int ct = 2;               // temporal compression (video mode only)
  int cs = 4;               // spatial compression per axis
  int codebook_size = 64;   // K
  int latent_dim = 4;       // d
  int base_channels = 8;
  int norm_groups = 4;
  double commitment = 0.25;     // beta_c
  int dead_code_steps = 500;    // idle train steps before an entry is re-seeded

  static TokenizerConfig desk() { return {}; }
  static TokenizerConfig large() {
    TokenizerConfig c;
    c.ct = 4;
    c.cs = 8;
    c.codebook_size = 32768;
    c.latent_dim = 4;
    return c;
  }
  void validate() const;
  bool operator==(const TokenizerConfig&) const = default;
};

struct LatentDims {
  int t = 0, h = 0, w = 0;
  int64_t positions() const { return int64_t{t} * h * w; }
  bool operator==(const LatentDims&) const = default;
};

// Grid dims for a clip of the given size; throws std::invalid_argument with
// the offending axis when a dimension is not divisible by its factor.
LatentDims latent_dims(const TokenizerConfig& config, int t, int h, int w, MediaKind kind);

// Nearest codebook row for every latent row; ties resolve to the lowest index.
std::vector<int32_t> nearest_codes(const Tensor& latents, const Tensor& codebook);

struct Quantized {
  std::vector<int32_t> indices;
  Tensor z_q;              // codebook rows, gradient routed straight through to z_e
  Tensor codebook_loss;    // mean over positions of |sg(z_e) - e|^2
  Tensor commitment_loss;  // mean over positions of |z_e - sg(e)|^2
};

// latents [N, d] against codebook [K, d].
Quantized quantize(const Tensor& latents, const Tensor& codebook);

struct LossBreakdown {
  double l2 = 0, codebook = 0, commitment = 0, total = 0;
  // What the step quantized: indices for latents [N, d] against the
  // codebook [K, d] as it stood before the update.
  std::vector<int32_t> indices;
  std::vector<Real> latents, codebook_rows;
};

// Convolutional VQ autoencoder. The encoder is a stack of strided 3-D
// convolutions followed by two temporal residual blocks; the decoder mirrors
// it with transposed convolutions. Image clips run every stage with
// temporal stride 1.
class VqTokenizer {
 public:
  explicit VqTokenizer(TokenizerConfig config, uint64_t seed = 0);
  // Parameters are shared handles, so copies would alias.
  VqTokenizer(const VqTokenizer&) = delete;
  VqTokenizer& operator=(const VqTokenizer&) = delete;
  VqTokenizer(VqTokenizer&&) = default;
  VqTokenizer& operator=(VqTokenizer&&) = default;

  const TokenizerConfig& config() const { return config_; }
  NamedParams parameters() const;
  Tensor& codebook() { return codebook_; }
  const Tensor& codebook() const { return codebook_; }

  // [B, 3, T, H, W] -> z_e [B, d, t', h', w']
  Tensor encode(const Tensor& clips, MediaKind kind) const;
  // [B, d, t', h', w'] -> raw (unclamped) pixels [B, 3, T, H, W]
  Tensor decode_latents(const Tensor& latents, MediaKind kind) const;

  VisionGrid tokenize(const MediaClip& clip) const;
  MediaClip detokenize(const VisionGrid& grid) const;
  MediaClip reconstruct(const MediaClip& clip) const { return detokenize(tokenize(clip)); }

  struct Objective {
    Tensor total, l2;
    Quantized q;
    Tensor latent_rows;  // z_e as [positions, d]
  };
  // Differentiable training objective on [B, 3, T, H, W]; records onto the
  // active graph when one is in scope.
  Objective objective(const Tensor& clips, MediaKind kind) const;

  // One optimizer step on a batch of same-shaped clips.
  // total = l2 + codebook + commitment_coeff * commitment.
  LossBreakdown train_step(std::span<const MediaClip> batch, AdamW& optimizer, double lr);

  // Usage statistics; sum(usage) == positions_quantized().
  const std::vector<int64_t>& usage() const { return usage_; }
  int64_t quantize_calls() const { return quantize_calls_; }
  int64_t positions_quantized() const { return positions_quantized_; }
  const std::vector<int64_t>& idle_steps() const { return idle_; }
  bool codebook_initialized() const { return codebook_ready_; }

  // Training bookkeeping persisted alongside parameters.
  struct State {
    std::vector<int64_t> usage, idle;
    int64_t quantize_calls = 0, positions_quantized = 0;
    bool codebook_ready = false;
    std::string rng;
  };
  State state() const;
  void restore_state(const State& s);

 private:
  struct Conv {
    Tensor w, b;
  };
  struct Norm {
    Tensor gamma, beta;
  };
  struct ResBlock {
    Norm n1, n2;
    Conv c1, c2;
  };

  Conv make_conv(const std::string& name, int out, int in, int k, bool transposed);
  Norm make_norm(const std::string& name, int channels);
  Tensor norm_act(const Norm& n, const Tensor& x) const;
  Tensor res_block(const ResBlock& r, const Tensor& x) const;
  std::array<int, 3> stage_stride(int stage, MediaKind kind) const;
  void record_usage(std::span<const int32_t> indices);
  void maintain_codebook(const Tensor& latents, std::span<const int32_t> indices);

  TokenizerConfig config_;
  Rng rng_;
  int stages_ = 0, spatial_stages_ = 0, temporal_stages_ = 0;
  NamedParams params_;
  Conv enc_in_;
  std::vector<Norm> enc_down_norm_;
  std::vector<Conv> enc_down_;
  std::vector<ResBlock> enc_res_;
  Norm enc_out_norm_;
  Conv enc_out_;
  Tensor codebook_;
  Conv dec_in_;
  std::vector<ResBlock> dec_res_;
  std::vector<Norm> dec_up_norm_;
  std::vector<Conv> dec_up_;
  Norm dec_out_norm_;
  Conv dec_out_;

  std::vector<int64_t> usage_, idle_;
  int64_t quantize_calls_ = 0, positions_quantized_ = 0;
  bool codebook_ready_ = false;
};

// Clip pixels [t, c, h, w] <-> tensor [1, c, t, h, w].
Tensor clip_to_tensor(const MediaClip& clip);
Tensor clips_to_tensor(std::span<const MediaClip> clips);

}  // namespace mmt::vq
