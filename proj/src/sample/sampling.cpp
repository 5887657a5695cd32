#include "mmt/sample/sampling.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>
#include <stdexcept>

namespace mmt::sample {

namespace {

constexpr Real kNegInf = -std::numeric_limits<Real>::infinity();

void check_vocab(const model::Transformer& m, const codec::VocabLayout& layout) {
  if (m.config().vocab != layout.total())
    throw std::invalid_argument("model vocab " + std::to_string(m.config().vocab) + " does not match layout total " +
                                std::to_string(layout.total()));
}

int32_t pick(std::vector<Real> logits, const SampleParams& p, Rng& rng) {
  return sample_token(top_k_top_p_filter(logits, p.top_k, p.top_p), p.temperature, rng);
}

void append_frame_skeleton(std::vector<int32_t>& out, int h, int w, bool video, const codec::VocabLayout& layout) {
  for (int y = 0; y < h; ++y) {
    out.insert(out.end(), static_cast<size_t>(w), -1);
    out.push_back(layout.eol());
  }
  if (video) out.push_back(layout.eof());
}

}  // namespace

void SampleParams::validate() const {
  if (top_k < 1) throw std::invalid_argument("sample params: top_k must be >= 1");
  if (!(top_p > 0.0 && top_p <= 1.0)) throw std::invalid_argument("sample params: top_p must lie in (0, 1]");
  if (!(temperature > 0.0) || !std::isfinite(temperature)) throw std::invalid_argument("sample params: temperature must be positive");
  if (!std::isfinite(guidance)) throw std::invalid_argument("sample params: guidance must be finite");
}

nlohmann::json params_to_json(const SampleParams& p) {
  return {{"top_k", p.top_k}, {"top_p", p.top_p}, {"guidance", p.guidance}, {"temperature", p.temperature}, {"seed", p.seed}};
}

SampleParams params_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw std::invalid_argument("sample params must be a JSON object");
  static const std::set<std::string> known{"top_k", "top_p", "guidance", "temperature", "seed"};
  for (const auto& [k, v] : j.items())
    if (!known.count(k)) throw std::invalid_argument("unknown sample key '" + k + "'");
  SampleParams p;
  p.top_k = j.value("top_k", p.top_k);
  p.top_p = j.value("top_p", p.top_p);
  p.guidance = j.value("guidance", p.guidance);
  p.temperature = j.value("temperature", p.temperature);
  p.seed = j.value("seed", p.seed);
  p.validate();
  return p;
}

std::vector<Real> top_k_top_p_filter(std::span<const Real> logits, int k, double p) {
  if (k < 1) throw std::invalid_argument("top_k must be >= 1");
  if (!(p > 0.0 && p <= 1.0)) throw std::invalid_argument("top_p must lie in (0, 1]");
  const size_t n = logits.size();
  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) { return logits[a] > logits[b]; });
  size_t keep = std::min(n, static_cast<size_t>(k));
  while (keep > 1 && logits[order[keep - 1]] == kNegInf) --keep;
  if (p < 1.0 && keep > 1) {
    const double mx = logits[order[0]];
    std::vector<double> e(keep);
    double z = 0;
    for (size_t i = 0; i < keep; ++i) z += e[i] = std::exp(double(logits[order[i]]) - mx);
    double cum = 0;
    size_t cut = keep;
    for (size_t i = 0; i < keep; ++i) {
      cum += e[i] / z;
      if (cum >= p - 1e-9) {
        cut = i + 1;
        break;
      }
    }
    keep = cut;
  }
  std::vector<Real> out(n, kNegInf);
  for (size_t i = 0; i < keep; ++i) out[order[i]] = logits[order[i]];
  return out;
}

std::vector<Real> cfg_logits(std::span<const Real> cond, std::span<const Real> uncond, double s) {
  if (cond.size() != uncond.size())
    throw std::invalid_argument("cfg: " + std::to_string(cond.size()) + " conditional vs " + std::to_string(uncond.size()) + " unconditional logits");
  if (s == 1.0) return {cond.begin(), cond.end()};
  if (s == 0.0) return {uncond.begin(), uncond.end()};
  std::vector<Real> out(cond.size());
  for (size_t i = 0; i < cond.size(); ++i) {
    if (cond[i] == kNegInf || uncond[i] == kNegInf) {
      out[i] = kNegInf;
      continue;
    }
    out[i] = static_cast<Real>(double(uncond[i]) + s * (double(cond[i]) - double(uncond[i])));
  }
  return out;
}

int32_t sample_token(std::span<const Real> logits, double temperature, Rng& rng) {
  if (!(temperature > 0)) throw std::invalid_argument("temperature must be positive");
  if (logits.empty()) throw std::invalid_argument("sample_token: no logits");
  double mx = kNegInf;
  for (Real v : logits)
    if (std::isnan(v)) throw std::runtime_error("sample_token: NaN logit");
    else mx = std::max(mx, double(v));
  if (mx == kNegInf) throw std::runtime_error("sample_token: every token is masked");
  std::vector<double> e(logits.size());
  double z = 0;
  size_t survivors = 0, last = 0;
  for (size_t i = 0; i < logits.size(); ++i) {
    if (logits[i] == kNegInf) continue;
    z += e[i] = std::exp((double(logits[i]) - mx) / temperature);
    ++survivors;
    last = i;
  }
  if (survivors == 1) {
    rng.uniform();  // keep the draw count independent of the distribution
    return static_cast<int32_t>(last);
  }
  const double u = rng.uniform() * z;
  double cum = 0;
  for (size_t i = 0; i < logits.size(); ++i) {
    if (logits[i] == kNegInf) continue;
    cum += e[i];
    if (u < cum) return static_cast<int32_t>(i);
  }
  return static_cast<int32_t>(last);
}

void mask_outside(std::vector<Real>& logits, int32_t begin, int32_t end, std::span<const int32_t> extra) {
  for (int32_t i = 0; i < static_cast<int32_t>(logits.size()); ++i)
    if ((i < begin || i >= end) && std::find(extra.begin(), extra.end(), i) == extra.end()) logits[i] = kNegInf;
}

GenerationPlan make_plan(int t, int h, int w, vq::MediaKind kind, const codec::VocabLayout& layout) {
  if (t < 1 || h < 1 || w < 1) throw std::invalid_argument("generation plan: dims must be positive");
  if (kind == vq::MediaKind::image && t != 1) throw std::invalid_argument("generation plan: an image has one frame");
  GenerationPlan p;
  p.t = t;
  p.h = h;
  p.w = w;
  p.kind = kind;
  for (int f = 0; f < t; ++f) append_frame_skeleton(p.skeleton, h, w, kind == vq::MediaKind::video, layout);
  p.skeleton.push_back(layout.eov());
  p.free_positions = int64_t{t} * h * w;
  return p;
}

std::vector<int32_t> generation_prompt(std::span<const int32_t> caption, const vq::VisionGrid& shape, const codec::VocabLayout& layout) {
  std::vector<int32_t> out{layout.bos()};
  for (int32_t id : caption) {
    if (id < 0 || id >= layout.text_size) throw std::out_of_range("caption id " + std::to_string(id) + " is not a text id");
    out.push_back(id);
  }
  out.push_back(layout.sov());
  for (int32_t id : codec::encode_text(codec::format_meta(shape))) out.push_back(id);
  out.push_back(layout.sot());
  return out;
}

namespace {

// Decodes the free positions of `skeleton` (without its final EOV) after
// prefilled caches. uncond may be null when no guidance is needed.
std::vector<int32_t> decode_stream(const model::Transformer& m, const std::vector<int32_t>& skeleton, model::KvCache& cond,
                                   std::vector<Real> cond_logits, model::KvCache* uncond, std::vector<Real> uncond_logits,
                                   const codec::VocabLayout& layout, const SampleParams& params, Rng& rng) {
  std::vector<int32_t> codes;
  const int32_t vb = layout.vision_base();
  for (size_t i = 0; i < skeleton.size(); ++i) {
    int32_t id = skeleton[i];
    if (id < 0) {
      std::vector<Real> logits = uncond ? cfg_logits(cond_logits, uncond_logits, params.guidance) : cond_logits;
      mask_outside(logits, vb, layout.total());
      id = pick(std::move(logits), params, rng);
      codes.push_back(id - vb);
    }
    if (i + 1 == skeleton.size()) break;
    cond_logits = m.step(cond, id);
    if (uncond) uncond_logits = m.step(*uncond, id);
  }
  return codes;
}

}  // namespace

vq::VisionGrid generate_image(const model::Transformer& m, std::span<const int32_t> caption, const vq::VisionGrid& shape,
                              const codec::VocabLayout& layout, const SampleParams& params) {
  check_vocab(m, layout);
  params.validate();
  if (shape.codebook_size != layout.codebook_size)
    throw std::invalid_argument("grid codebook " + std::to_string(shape.codebook_size) + " does not match layout codebook " +
                                std::to_string(layout.codebook_size));
  const auto plan = make_plan(shape.t, shape.h, shape.w, shape.kind, layout);
  std::vector<int32_t> skeleton(plan.skeleton.begin(), plan.skeleton.end() - 1);
  const auto cond_prompt = generation_prompt(caption, shape, layout);
  const auto uncond_prompt = generation_prompt({}, shape, layout);
  const int64_t need = static_cast<int64_t>(cond_prompt.size() + skeleton.size()) - 1;
  if (need > m.config().max_context)
    throw std::length_error("generation needs " + std::to_string(need) + " positions but the model context is " +
                            std::to_string(m.config().max_context));
  Rng rng(params.seed);
  auto cond = m.new_cache();
  auto cond_logits = m.prefill(cond, cond_prompt);
  const bool guided = params.guidance != 1.0 && !caption.empty();
  model::KvCache uncond;
  std::vector<Real> uncond_logits;
  if (guided) {
    uncond = m.new_cache();
    uncond_logits = m.prefill(uncond, uncond_prompt);
  }
  vq::VisionGrid out = shape;
  out.indices = decode_stream(m, skeleton, cond, std::move(cond_logits), guided ? &uncond : nullptr, std::move(uncond_logits), layout,
                              params, rng);
  out.validate();
  return out;
}

vq::VisionGrid extend_video(const model::Transformer& m, const vq::VisionGrid& prefix, int n, const codec::VocabLayout& layout,
                            const SampleParams& params, std::span<const int32_t> caption) {
  check_vocab(m, layout);
  params.validate();
  prefix.validate();
  if (prefix.kind != vq::MediaKind::video) throw std::invalid_argument("extend: prefix must be a video grid");
  if (n < 0) throw std::invalid_argument("extend: frame count must be nonnegative");
  if (prefix.codebook_size != layout.codebook_size) throw std::invalid_argument("extend: grid codebook does not match layout");
  vq::VisionGrid out = prefix;
  if (n == 0) return out;
  const size_t frame_codes = static_cast<size_t>(prefix.h) * prefix.w;
  const int64_t frame_len = int64_t{prefix.h} * (prefix.w + 1) + 1;
  const int64_t ctx = m.config().max_context;
  Rng rng(params.seed);
  int remaining = n;
  while (remaining > 0) {
    const int have = out.t;
    // Largest window of recent frames plus new chunk that fits the context.
    int window = have, chunk = remaining;
    auto fits = [&](int win, int ch) {
      vq::VisionGrid shape = out;
      shape.t = win + ch;
      const auto prompt = generation_prompt(caption, shape, layout);
      return static_cast<int64_t>(prompt.size()) + int64_t{win + ch} * frame_len - 1 <= ctx;
    };
    if (!fits(0, 1)) throw std::length_error("extend: a single frame does not fit the model context of " + std::to_string(ctx));
    while (!fits(window, chunk)) {
      if (chunk > 1 && (chunk >= window || window <= 1)) --chunk;
      else --window;
    }
    vq::VisionGrid ctx_grid = out;
    ctx_grid.t = window + chunk;
    const auto prompt = generation_prompt(caption, ctx_grid, layout);
    std::vector<int32_t> context = prompt;
    for (int f = have - window; f < have; ++f) {
      for (int y = 0; y < out.h; ++y) {
        for (int x = 0; x < out.w; ++x) context.push_back(layout.vision_id(out.indices[f * frame_codes + y * out.w + x]));
        context.push_back(layout.eol());
      }
      context.push_back(layout.eof());
    }
    std::vector<int32_t> skeleton;
    for (int f = 0; f < chunk; ++f) append_frame_skeleton(skeleton, out.h, out.w, true, layout);
    auto cond = m.new_cache();
    auto cond_logits = m.prefill(cond, context);
    const bool guided = params.guidance != 1.0 && !caption.empty();
    model::KvCache uncond;
    std::vector<Real> uncond_logits;
    if (guided) {
      vq::VisionGrid g = ctx_grid;
      auto uctx = generation_prompt({}, g, layout);
      uctx.insert(uctx.end(), context.begin() + static_cast<int64_t>(prompt.size()), context.end());
      uncond = m.new_cache();
      uncond_logits = m.prefill(uncond, uctx);
    }
    auto codes = decode_stream(m, skeleton, cond, std::move(cond_logits), guided ? &uncond : nullptr, std::move(uncond_logits), layout,
                               params, rng);
    out.indices.insert(out.indices.end(), codes.begin(), codes.end());
    out.t += chunk;
    remaining -= chunk;
  }
  out.validate();
  return out;
}

std::string caption_image(const model::Transformer& m, const vq::VisionGrid& grid, const codec::VocabLayout& layout,
                          const SampleParams& params, int max_tokens) {
  check_vocab(m, layout);
  params.validate();
  grid.validate();
  std::vector<int32_t> context{layout.bos(), layout.sov()};
  for (int32_t id : codec::encode_text(codec::format_meta(grid))) context.push_back(id);
  context.push_back(layout.sot());
  for (int32_t id : codec::flatten_grid(grid, layout)) context.push_back(id);
  context.push_back(layout.eov());
  if (static_cast<int64_t>(context.size()) > m.config().max_context)
    throw std::length_error("caption context of " + std::to_string(context.size()) + " tokens exceeds the model context");
  Rng rng(params.seed);
  auto cache = m.new_cache();
  auto logits = m.prefill(cache, context);
  const int32_t eos[] = {layout.eos()};
  std::vector<int32_t> text;
  for (int i = 0; i < max_tokens; ++i) {
    mask_outside(logits, 0, layout.text_size, eos);
    const int32_t id = pick(std::move(logits), params, rng);
    if (id == layout.eos()) break;
    text.push_back(id);
    if (cache.length >= m.config().max_context) break;
    logits = m.step(cache, id);
  }
  return codec::decode_text(text);
}

}  // namespace mmt::sample
