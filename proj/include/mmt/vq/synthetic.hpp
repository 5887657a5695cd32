#pragma once

#include <cstdint>
#include <vector>

#include "mmt/vq/media.hpp"

namespace mmt::vq {

// Two procedural pattern families: coloured diagonal stripes with a random
// phase, and two-colour checkerboards of 8 px cells. Video clips shift the
// pattern by one pixel per frame. Item i uses family i % 2.
std::vector<MediaClip> two_pattern_set(int count, int t, int h, int w, MediaKind kind, uint64_t seed);

// Per-pixel mean over the set, replicated as one clip.
MediaClip mean_clip(const std::vector<MediaClip>& clips);

}  // namespace mmt::vq
