#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "mmt/codec/codec.hpp"
#include "mmt/model/transformer.hpp"
#include "mmt/rng.hpp"

namespace mmt::sample {

inline constexpr int kDefaultTopK = 16384;

struct SampleParams {
  int top_k = kDefaultTopK;
  double top_p = 1.0;
  double guidance = 5.0;
  double temperature = 1.0;
  uint64_t seed = 0;

  void validate() const;
  bool operator==(const SampleParams&) const = default;
};

nlohmann::json params_to_json(const SampleParams& p);
// Missing keys keep defaults; unknown keys are rejected.
SampleParams params_from_json(const nlohmann::json& j);

// Top-k by logit, then the shortest prefix of the descending order whose
// renormalized mass reaches p. Dropped entries become -inf. Ties keep the
// lower index first.
std::vector<Real> top_k_top_p_filter(std::span<const Real> logits, int k, double p);

// uncond + s * (cond - uncond); s == 1 returns cond and s == 0 returns
// uncond exactly.
std::vector<Real> cfg_logits(std::span<const Real> cond, std::span<const Real> uncond, double s);

// Draws from softmax(logits / temperature); -inf entries are never chosen.
int32_t sample_token(std::span<const Real> logits, double temperature, Rng& rng);

// Sets every id outside [begin, end) to -inf, except the listed extras.
void mask_outside(std::vector<Real>& logits, int32_t begin, int32_t end, std::span<const int32_t> extra = {});

// Token skeleton of a vision stream: structural ids at fixed positions,
// -1 where a codebook id goes. Ends with EOV.
struct GenerationPlan {
  int t = 1, h = 0, w = 0;
  vq::MediaKind kind = vq::MediaKind::image;
  std::vector<int32_t> skeleton;
  int64_t free_positions = 0;

  int64_t structural_positions() const { return static_cast<int64_t>(skeleton.size()) - free_positions; }
};
GenerationPlan make_plan(int t, int h, int w, vq::MediaKind kind, const codec::VocabLayout& layout);

// BOS caption SOV meta SOT for the grid's declared dims.
std::vector<int32_t> generation_prompt(std::span<const int32_t> caption, const vq::VisionGrid& shape, const codec::VocabLayout& layout);

// Samples a grid shaped like `shape` (indices ignored). CFG applies at
// codebook positions against the empty-caption context; structural tokens
// are forced.
vq::VisionGrid generate_image(const model::Transformer& m, std::span<const int32_t> caption, const vq::VisionGrid& shape,
                              const codec::VocabLayout& layout, const SampleParams& params);

// Appends n frames to a video grid. When the whole sequence does not fit the
// model context, the most recent frames are re-used as a sliding window.
vq::VisionGrid extend_video(const model::Transformer& m, const vq::VisionGrid& prefix, int n, const codec::VocabLayout& layout,
                            const SampleParams& params, std::span<const int32_t> caption = {});

// Understanding-mode decoding: text ids and EOS only, no guidance. Stops at
// EOS, after max_tokens, or when the context is full.
std::string caption_image(const model::Transformer& m, const vq::VisionGrid& grid, const codec::VocabLayout& layout,
                          const SampleParams& params, int max_tokens = 64);

}  // namespace mmt::sample
