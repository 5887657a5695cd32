#include "mmt/vq/synthetic.hpp"

#include <cmath>
#include <stdexcept>

#include "mmt/rng.hpp"

namespace mmt::vq {

std::vector<MediaClip> two_pattern_set(int count, int t, int h, int w, MediaKind kind, uint64_t seed) {
  if (count <= 0 || t <= 0 || h <= 0 || w <= 0) throw std::invalid_argument("two_pattern_set: dimensions must be positive");
  if (kind == MediaKind::image && t != 1) throw std::invalid_argument("two_pattern_set: images have one frame");
  Rng rng(seed);
  std::vector<MediaClip> out;
  out.reserve(count);
  for (int i = 0; i < count; ++i) {
    MediaClip c;
    c.t = t;
    c.c = 3;
    c.h = h;
    c.w = w;
    c.fps = kind == MediaKind::image ? 1 : 8;
    c.kind = kind;
    c.pixels.resize(c.size());
    float fg[3], bg[3];
    for (int ch = 0; ch < 3; ++ch) {
      fg[ch] = static_cast<float>(0.6 + 0.4 * rng.uniform());
      bg[ch] = static_cast<float>(0.3 * rng.uniform());
    }
    const int phase = static_cast<int>(rng.below(8));
    const bool stripes = i % 2 == 0;
    for (int f = 0; f < t; ++f)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          const int sx = x + f + phase;
          const bool on = stripes ? ((sx + y) / 4) % 2 == 0 : ((sx / 8) + (y / 8)) % 2 == 0;
          for (int ch = 0; ch < 3; ++ch)
            c.pixels[((static_cast<size_t>(f) * 3 + ch) * h + y) * w + x] = on ? fg[ch] : bg[ch];
        }
    out.push_back(std::move(c));
  }
  return out;
}

MediaClip mean_clip(const std::vector<MediaClip>& clips) {
  if (clips.empty()) throw std::invalid_argument("mean_clip: empty set");
  MediaClip m = clips.front();
  std::vector<double> acc(m.pixels.size(), 0.0);
  for (const auto& c : clips) {
    if (c.pixels.size() != acc.size()) throw std::invalid_argument("mean_clip: shape mismatch");
    for (size_t i = 0; i < acc.size(); ++i) acc[i] += c.pixels[i];
  }
  for (size_t i = 0; i < acc.size(); ++i) m.pixels[i] = static_cast<float>(acc[i] / clips.size());
  return m;
}

}  // namespace mmt::vq
