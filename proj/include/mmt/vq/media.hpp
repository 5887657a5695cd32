#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "mmt/io/error.hpp"

namespace mmt::vq {

enum class MediaKind { image, video };

const char* kind_name(MediaKind kind);

// Pixels in [0, 1], laid out t x c x h x w.
struct MediaClip {
  int t = 1;
  int c = 3;
  int h = 0;
  int w = 0;
  int fps = 1;
  MediaKind kind = MediaKind::image;
  std::vector<float> pixels;

  size_t size() const { return static_cast<size_t>(t) * c * h * w; }
  void validate() const;  // throws std::invalid_argument
};

// Codebook indices laid out t x h x w, plus the geometry they came from.
struct VisionGrid {
  int t = 1;
  int h = 0;
  int w = 0;
  int codebook_size = 0;
  int ct = 1;  // temporal factor actually applied (1 in image mode)
  int cs = 1;
  int fps = 1;
  MediaKind kind = MediaKind::image;
  std::vector<int32_t> indices;

  size_t size() const { return static_cast<size_t>(t) * h * w; }
  int source_t() const { return t * ct; }
  int source_h() const { return h * cs; }
  int source_w() const { return w * cs; }
  void validate() const;

  bool operator==(const VisionGrid&) const = default;
};

using io::FormatError;

// RTF1: "RTF1 t c h w fps\n" then t*c*h*w little-endian float32.
// A single-frame file is read back as an image.
void write_rtf(const std::filesystem::path& path, const MediaClip& clip);
MediaClip read_rtf(const std::filesystem::path& path);

// VGF1: "VGF1 t h w K ct cs fps\n" then t*h*w little-endian uint32.
// Grids with ct > 1 or more than one frame are read back as video.
void write_vgf(const std::filesystem::path& path, const VisionGrid& grid);
VisionGrid read_vgf(const std::filesystem::path& path);

}  // namespace mmt::vq
