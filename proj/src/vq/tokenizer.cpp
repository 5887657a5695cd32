#include "mmt/vq/tokenizer.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "mmt/ops.hpp"

namespace mmt::vq {

namespace {

bool power_of_two(int v) { return v >= 1 && std::has_single_bit(static_cast<unsigned>(v)); }

int group_count(int channels, int wanted) {
  int g = std::min(wanted, channels);
  while (g > 1 && channels % g != 0) --g;
  return std::max(g, 1);
}

}  // namespace

void TokenizerConfig::validate() const {
  if (!power_of_two(ct)) throw std::invalid_argument("tokenizer config: ct must be a power of two");
  if (!power_of_two(cs)) throw std::invalid_argument("tokenizer config: cs must be a power of two");
  if (codebook_size < 2) throw std::invalid_argument("tokenizer config: codebook size must be at least 2");
  if (latent_dim < 1 || base_channels < 1 || norm_groups < 1)
    throw std::invalid_argument("tokenizer config: latent_dim, base_channels and norm_groups must be positive");
  if (commitment < 0) throw std::invalid_argument("tokenizer config: commitment coefficient must be nonnegative");
}

LatentDims latent_dims(const TokenizerConfig& config, int t, int h, int w, MediaKind kind) {
  if (t <= 0 || h <= 0 || w <= 0) throw std::invalid_argument("clip dimensions must be positive");
  if (h % config.cs != 0)
    throw std::invalid_argument("height " + std::to_string(h) + " is not divisible by spatial factor " + std::to_string(config.cs));
  if (w % config.cs != 0)
    throw std::invalid_argument("width " + std::to_string(w) + " is not divisible by spatial factor " + std::to_string(config.cs));
  LatentDims d{t, h / config.cs, w / config.cs};
  if (kind == MediaKind::image) {
    if (t != 1) throw std::invalid_argument("image clips must have exactly one frame, got " + std::to_string(t));
  } else {
    if (t % config.ct != 0)
      throw std::invalid_argument("frame count " + std::to_string(t) + " is not divisible by temporal factor " +
                                  std::to_string(config.ct));
    d.t = t / config.ct;
  }
  return d;
}

std::vector<int32_t> nearest_codes(const Tensor& latents, const Tensor& codebook) {
  if (codebook.ndim() != 2 || codebook.dim(0) == 0) throw std::invalid_argument("quantize: empty codebook");
  const int64_t K = codebook.dim(0), d = codebook.dim(1);
  if (latents.ndim() != 2 || latents.dim(1) != d)
    throw std::invalid_argument("quantize: latents " + shape_str(latents.shape()) + " vs codebook " + shape_str(codebook.shape()));
  const int64_t N = latents.dim(0);
  const Real* z = latents.data().data();
  const Real* e = codebook.data().data();
  std::vector<int32_t> out(static_cast<size_t>(N));
  for (int64_t n = 0; n < N; ++n) {
    double best = std::numeric_limits<double>::infinity();
    int32_t arg = 0;
    for (int64_t k = 0; k < K; ++k) {
      double dist = 0;
      for (int64_t j = 0; j < d; ++j) {
        const double diff = static_cast<double>(z[n * d + j]) - e[k * d + j];
        dist += diff * diff;
      }
      if (dist < best) {
        best = dist;
        arg = static_cast<int32_t>(k);
      }
    }
    out[n] = arg;
  }
  return out;
}

Quantized quantize(const Tensor& latents, const Tensor& codebook) {
  Quantized q;
  q.indices = nearest_codes(latents, codebook);
  const int64_t N = latents.dim(0);
  Tensor selected = ops::embedding(codebook, q.indices, {N});
  const Real inv_n = N > 0 ? Real(1) / static_cast<Real>(N) : Real(0);
  Tensor diff_cb = ops::sub(ops::detach(latents), selected);
  q.codebook_loss = ops::scale(ops::sum(ops::mul(diff_cb, diff_cb)), inv_n);
  Tensor diff_commit = ops::sub(latents, ops::detach(selected));
  q.commitment_loss = ops::scale(ops::sum(ops::mul(diff_commit, diff_commit)), inv_n);
  q.z_q = ops::straight_through(latents, selected);
  return q;
}

Tensor clip_to_tensor(const MediaClip& clip) { return clips_to_tensor(std::span<const MediaClip>(&clip, 1)); }

Tensor clips_to_tensor(std::span<const MediaClip> clips) {
  if (clips.empty()) throw std::invalid_argument("empty clip batch");
  const MediaClip& f = clips.front();
  for (const auto& c : clips) {
    c.validate();
    if (c.t != f.t || c.c != f.c || c.h != f.h || c.w != f.w || c.kind != f.kind)
      throw std::invalid_argument("clip batch must have uniform shape and kind");
  }
  const int64_t B = static_cast<int64_t>(clips.size()), T = f.t, C = f.c, H = f.h, W = f.w;
  std::vector<Real> data(static_cast<size_t>(B * C * T * H * W));
  const int64_t plane = H * W;
  for (int64_t b = 0; b < B; ++b)
    for (int64_t t = 0; t < T; ++t)
      for (int64_t c = 0; c < C; ++c) {
        const float* src = clips[b].pixels.data() + (t * C + c) * plane;
        Real* dst = data.data() + ((b * C + c) * T + t) * plane;
        for (int64_t i = 0; i < plane; ++i) dst[i] = src[i];
      }
  return Tensor::from({B, C, T, H, W}, std::move(data));
}

VqTokenizer::VqTokenizer(TokenizerConfig config, uint64_t seed) : config_(config), rng_(seed) {
  config_.validate();
  spatial_stages_ = std::countr_zero(static_cast<unsigned>(config_.cs));
  temporal_stages_ = std::countr_zero(static_cast<unsigned>(config_.ct));
  stages_ = std::max(spatial_stages_, temporal_stages_);
  const int C = config_.base_channels, M = 2 * config_.base_channels, d = config_.latent_dim;

  enc_in_ = make_conv("enc.conv_in", C, 3, 3, false);
  for (int s = 0; s < stages_; ++s) {
    const int in = s == 0 ? C : M;
    enc_down_norm_.push_back(make_norm("enc.down" + std::to_string(s) + ".norm", in));
    enc_down_.push_back(make_conv("enc.down" + std::to_string(s) + ".conv", M, in, 3, false));
  }
  const int mid = stages_ == 0 ? C : M;
  for (int r = 0; r < 2; ++r) {
    const std::string n = "enc.temporal_res" + std::to_string(r);
    enc_res_.push_back({make_norm(n + ".norm1", mid), make_norm(n + ".norm2", mid), make_conv(n + ".conv1", mid, mid, 3, false),
                        make_conv(n + ".conv2", mid, mid, 3, false)});
  }
  enc_out_norm_ = make_norm("enc.out.norm", mid);
  enc_out_ = make_conv("enc.out.conv", d, mid, 1, false);

  std::vector<Real> cb(static_cast<size_t>(config_.codebook_size) * d);
  for (auto& v : cb) v = static_cast<Real>(rng_.normal());
  codebook_ = Tensor::from({config_.codebook_size, d}, std::move(cb), true);
  params_.emplace_back("codebook", codebook_);

  dec_in_ = make_conv("dec.conv_in", mid, d, 3, false);
  for (int r = 0; r < 2; ++r) {
    const std::string n = "dec.temporal_res" + std::to_string(r);
    dec_res_.push_back({make_norm(n + ".norm1", mid), make_norm(n + ".norm2", mid), make_conv(n + ".conv1", mid, mid, 3, false),
                        make_conv(n + ".conv2", mid, mid, 3, false)});
  }
  // dec_up_[i] undoes enc_down_[i]; applied from the deepest stage outward.
  for (int s = 0; s < stages_; ++s) {
    const int out = s == 0 ? C : M;
    dec_up_norm_.push_back(make_norm("dec.up" + std::to_string(s) + ".norm", M));
    dec_up_.push_back(make_conv("dec.up" + std::to_string(s) + ".convt", out, M, 3, true));
  }
  dec_out_norm_ = make_norm("dec.out.norm", C);
  dec_out_ = make_conv("dec.out.conv", 3, C, 3, false);

  usage_.assign(config_.codebook_size, 0);
  idle_.assign(config_.codebook_size, 0);
}

VqTokenizer::Conv VqTokenizer::make_conv(const std::string& name, int out, int in, int k, bool transposed) {
  const int64_t fan_in = int64_t{in} * k * k * k;
  const double std = 1.0 / std::sqrt(static_cast<double>(fan_in));
  Shape shape = transposed ? Shape{in, out, k, k, k} : Shape{out, in, k, k, k};
  std::vector<Real> w(static_cast<size_t>(shape_numel(shape)));
  for (auto& v : w) v = static_cast<Real>(rng_.normal() * std);
  Conv c{Tensor::from(shape, std::move(w), true), Tensor::zeros({out}, true)};
  params_.emplace_back(name + ".w", c.w);
  params_.emplace_back(name + ".b", c.b);
  return c;
}

VqTokenizer::Norm VqTokenizer::make_norm(const std::string& name, int channels) {
  Norm n{Tensor::full({channels}, 1.0f, true), Tensor::zeros({channels}, true)};
  params_.emplace_back(name + ".gamma", n.gamma);
  params_.emplace_back(name + ".beta", n.beta);
  return n;
}

NamedParams VqTokenizer::parameters() const { return params_; }

Tensor VqTokenizer::norm_act(const Norm& n, const Tensor& x) const {
  return ops::silu(ops::group_norm(x, group_count(static_cast<int>(x.dim(1)), config_.norm_groups), n.gamma, n.beta));
}

Tensor VqTokenizer::res_block(const ResBlock& r, const Tensor& x) const {
  Tensor h = ops::conv3d(norm_act(r.n1, x), r.c1.w, r.c1.b, {1, 1, 1}, {1, 1, 1});
  h = ops::conv3d(norm_act(r.n2, h), r.c2.w, r.c2.b, {1, 1, 1}, {1, 1, 1});
  return ops::add(x, h);
}

std::array<int, 3> VqTokenizer::stage_stride(int stage, MediaKind kind) const {
  const int ts = (kind == MediaKind::video && stage >= stages_ - temporal_stages_) ? 2 : 1;
  const int ss = stage < spatial_stages_ ? 2 : 1;
  return {ts, ss, ss};
}

Tensor VqTokenizer::encode(const Tensor& clips, MediaKind kind) const {
  if (clips.ndim() != 5 || clips.dim(1) != 3) throw std::invalid_argument("encode: expected [B, 3, T, H, W], got " + shape_str(clips.shape()));
  (void)latent_dims(config_, static_cast<int>(clips.dim(2)), static_cast<int>(clips.dim(3)), static_cast<int>(clips.dim(4)), kind);
  Tensor h = ops::conv3d(clips, enc_in_.w, enc_in_.b, {1, 1, 1}, {1, 1, 1});
  for (int s = 0; s < stages_; ++s) {
    h = ops::conv3d(norm_act(enc_down_norm_[s], h), enc_down_[s].w, enc_down_[s].b, stage_stride(s, kind), {1, 1, 1});
  }
  for (const auto& r : enc_res_) h = res_block(r, h);
  return ops::conv3d(norm_act(enc_out_norm_, h), enc_out_.w, enc_out_.b, {1, 1, 1}, {0, 0, 0});
}

Tensor VqTokenizer::decode_latents(const Tensor& latents, MediaKind kind) const {
  if (latents.ndim() != 5 || latents.dim(1) != config_.latent_dim)
    throw std::invalid_argument("decode: expected [B, d, t, h, w] latents, got " + shape_str(latents.shape()));
  Tensor h = ops::conv3d(latents, dec_in_.w, dec_in_.b, {1, 1, 1}, {1, 1, 1});
  for (const auto& r : dec_res_) h = res_block(r, h);
  for (int s = stages_ - 1; s >= 0; --s) {
    const auto st = stage_stride(s, kind);
    h = ops::conv_transpose3d(norm_act(dec_up_norm_[s], h), dec_up_[s].w, dec_up_[s].b, st, {1, 1, 1},
                              {st[0] - 1, st[1] - 1, st[2] - 1});
  }
  return ops::conv3d(norm_act(dec_out_norm_, h), dec_out_.w, dec_out_.b, {1, 1, 1}, {1, 1, 1});
}

namespace {

// [B, d, t, h, w] -> [B*t*h*w, d]
Tensor latents_to_rows(const Tensor& z) {
  const int64_t d = z.dim(1);
  return ops::reshape(ops::permute(z, {0, 2, 3, 4, 1}), {-1, d});
}

// [B*t*h*w, d] -> [B, d, t, h, w]
Tensor rows_to_latents(const Tensor& rows, const Shape& latent_shape) {
  const Shape s = latent_shape;
  return ops::permute(ops::reshape(rows, {s[0], s[2], s[3], s[4], s[1]}), {0, 4, 1, 2, 3});
}

}  // namespace

VisionGrid VqTokenizer::tokenize(const MediaClip& clip) const {
  clip.validate();
  if (clip.c != 3) throw std::invalid_argument("tokenize: expected 3 channels, got " + std::to_string(clip.c));
  const LatentDims ld = latent_dims(config_, clip.t, clip.h, clip.w, clip.kind);
  Tensor z = encode(clip_to_tensor(clip), clip.kind);
  VisionGrid g;
  g.t = ld.t;
  g.h = ld.h;
  g.w = ld.w;
  g.codebook_size = config_.codebook_size;
  g.ct = clip.kind == MediaKind::video ? config_.ct : 1;
  g.cs = config_.cs;
  g.fps = clip.fps;
  g.kind = clip.kind;
  g.indices = nearest_codes(latents_to_rows(z), codebook_);
  return g;
}

MediaClip VqTokenizer::detokenize(const VisionGrid& grid) const {
  grid.validate();
  if (grid.codebook_size != config_.codebook_size)
    throw std::invalid_argument("decode: grid codebook size " + std::to_string(grid.codebook_size) + " != model " +
                                std::to_string(config_.codebook_size));
  const int expect_ct = grid.kind == MediaKind::video ? config_.ct : 1;
  if (grid.cs != config_.cs || grid.ct != expect_ct)
    throw std::invalid_argument("decode: grid compression (" + std::to_string(grid.ct) + "," + std::to_string(grid.cs) +
                                ") does not match model");
  Tensor rows = ops::embedding(codebook_, grid.indices, {static_cast<int64_t>(grid.indices.size())});
  Tensor latents = rows_to_latents(rows, {1, config_.latent_dim, grid.t, grid.h, grid.w});
  Tensor out = decode_latents(latents, grid.kind);
  MediaClip clip;
  clip.t = static_cast<int>(out.dim(2));
  clip.c = 3;
  clip.h = static_cast<int>(out.dim(3));
  clip.w = static_cast<int>(out.dim(4));
  clip.fps = grid.fps;
  clip.kind = grid.kind;
  clip.pixels.resize(clip.size());
  const int64_t plane = int64_t{clip.h} * clip.w;
  const Real* src = out.data().data();
  for (int t = 0; t < clip.t; ++t)
    for (int c = 0; c < 3; ++c)
      for (int64_t i = 0; i < plane; ++i) {
        const Real v = src[(int64_t{c} * clip.t + t) * plane + i];
        clip.pixels[(int64_t{t} * 3 + c) * plane + i] = std::isfinite(v) ? std::clamp(static_cast<float>(v), 0.0f, 1.0f) : 0.0f;
      }
  return clip;
}

void VqTokenizer::record_usage(std::span<const int32_t> indices) {
  ++quantize_calls_;
  positions_quantized_ += static_cast<int64_t>(indices.size());
  for (int32_t k : indices) ++usage_[k];
}

void VqTokenizer::maintain_codebook(const Tensor& latents, std::span<const int32_t> indices) {
  std::vector<bool> used(config_.codebook_size, false);
  for (int32_t k : indices) used[k] = true;
  const int64_t N = latents.dim(0), d = latents.dim(1);
  auto cb = codebook_.mutable_data();
  for (int k = 0; k < config_.codebook_size; ++k) {
    idle_[k] = used[k] ? 0 : idle_[k] + 1;
    if (idle_[k] >= config_.dead_code_steps) {
      const int64_t src = static_cast<int64_t>(rng_.below(static_cast<uint64_t>(N)));
      for (int64_t j = 0; j < d; ++j) cb[k * d + j] = latents.data()[src * d + j];
      idle_[k] = 0;
    }
  }
}

VqTokenizer::Objective VqTokenizer::objective(const Tensor& clips, MediaKind kind) const {
  Objective o;
  Tensor z = encode(clips, kind);
  o.latent_rows = latents_to_rows(z);
  o.q = quantize(o.latent_rows, codebook_);
  Tensor recon = decode_latents(rows_to_latents(o.q.z_q, z.shape()), kind);
  Tensor diff = ops::sub(recon, clips);
  o.l2 = ops::mean(ops::mul(diff, diff));
  o.total = ops::add(ops::add(o.l2, o.q.codebook_loss), ops::scale(o.q.commitment_loss, static_cast<Real>(config_.commitment)));
  return o;
}

LossBreakdown VqTokenizer::train_step(std::span<const MediaClip> batch, AdamW& optimizer, double lr) {
  Tensor x = clips_to_tensor(batch);
  const MediaKind kind = batch.front().kind;
  (void)latent_dims(config_, batch.front().t, batch.front().h, batch.front().w, kind);

  if (!codebook_ready_) {
    // Seed entries from encoder outputs so the first assignments are spread.
    Tensor rows = latents_to_rows(encode(x, kind));
    const int64_t N = rows.dim(0), d = rows.dim(1);
    auto cb = codebook_.mutable_data();
    for (int k = 0; k < config_.codebook_size; ++k) {
      const int64_t src = static_cast<int64_t>(rng_.below(static_cast<uint64_t>(N)));
      for (int64_t j = 0; j < d; ++j) cb[k * d + j] = static_cast<Real>(rows.data()[src * d + j] + 0.01 * rng_.normal());
    }
    codebook_ready_ = true;
  }

  zero_grads(params_);
  Graph graph;
  Objective obj;
  {
    GraphScope scope(graph);
    obj = objective(x, kind);
  }
  const Quantized& q = obj.q;
  const Tensor& total = obj.total;
  const Tensor& l2 = obj.l2;
  LossBreakdown out;
  out.l2 = l2.item();
  out.codebook = q.codebook_loss.item();
  out.commitment = q.commitment_loss.item();
  out.total = total.item();
  const auto zv = obj.latent_rows.data();
  const auto cv = codebook_.data();
  out.indices = q.indices;
  out.latents.assign(zv.begin(), zv.end());
  out.codebook_rows.assign(cv.begin(), cv.end());
  if (!std::isfinite(out.total) || !std::isfinite(out.l2) || !std::isfinite(out.codebook) || !std::isfinite(out.commitment))
    throw std::runtime_error("tokenizer train step: non-finite loss; step aborted");
  backward(graph, total, params_);
  optimizer.step(params_, lr);
  record_usage(q.indices);
  maintain_codebook(obj.latent_rows, q.indices);
  return out;
}

VqTokenizer::State VqTokenizer::state() const {
  return {usage_, idle_, quantize_calls_, positions_quantized_, codebook_ready_, rng_.state()};
}

void VqTokenizer::restore_state(const State& s) {
  if (s.usage.size() != usage_.size() || s.idle.size() != idle_.size())
    throw std::invalid_argument("tokenizer state: codebook size mismatch");
  usage_ = s.usage;
  idle_ = s.idle;
  quantize_calls_ = s.quantize_calls;
  positions_quantized_ = s.positions_quantized;
  codebook_ready_ = s.codebook_ready;
  rng_.set_state(s.rng);
}

}  // namespace mmt::vq
