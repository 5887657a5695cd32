#include "mmt/vq/media.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

namespace mmt::vq {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

const char* kind_name(MediaKind kind) { return kind == MediaKind::image ? "image" : "video"; }

void MediaClip::validate() const {
  if (t <= 0 || c <= 0 || h <= 0 || w <= 0 || fps <= 0)
    throw std::invalid_argument("media clip: dimensions must be positive");
  if (kind == MediaKind::image && t != 1) throw std::invalid_argument("media clip: image must have exactly one frame");
  if (pixels.size() != size())
    throw std::invalid_argument("media clip: " + std::to_string(pixels.size()) + " values for " + std::to_string(size()) +
                                " pixels");
}

void VisionGrid::validate() const {
  if (t <= 0 || h <= 0 || w <= 0) throw std::invalid_argument("vision grid: dimensions must be positive");
  if (codebook_size < 2) throw std::invalid_argument("vision grid: codebook size must be at least 2");
  if (indices.size() != size()) throw std::invalid_argument("vision grid: index count does not match dimensions");
  for (int32_t v : indices) {
    if (v < 0 || v >= codebook_size)
      throw std::out_of_range("vision grid: index " + std::to_string(v) + " outside codebook of size " +
                              std::to_string(codebook_size));
  }
}

namespace {

constexpr size_t kMaxHeader = 256;

std::vector<long long> read_header(std::ifstream& in, const std::filesystem::path& path, const std::string& magic,
                                   size_t fields) {
  std::string line;
  char ch = 0;
  while (line.size() < kMaxHeader && in.get(ch) && ch != '\n') line.push_back(ch);
  if (ch != '\n') throw FormatError(path, line.size(), "unterminated " + magic + " header");
  std::istringstream ls(line);
  std::string got;
  ls >> got;
  if (got != magic) throw FormatError(path, 0, "expected magic '" + magic + "', found '" + got + "'");
  std::vector<long long> vals;
  for (size_t i = 0; i < fields; ++i) {
    const auto pos = ls.tellg();
    long long v = 0;
    if (!(ls >> v) || v < 0) {
      throw FormatError(path, pos < 0 ? line.size() : static_cast<uint64_t>(pos),
                        "malformed header field " + std::to_string(i + 1) + " of " + std::to_string(fields));
    }
    vals.push_back(v);
  }
  std::string extra;
  if (ls >> extra) throw FormatError(path, line.size(), "unexpected trailing header content '" + extra + "'");
  return vals;
}

template <class T>
void read_payload(std::ifstream& in, const std::filesystem::path& path, std::vector<T>& out, size_t count) {
  const auto start = static_cast<uint64_t>(in.tellg());
  out.resize(count);
  in.read(reinterpret_cast<char*>(out.data()), static_cast<std::streamsize>(count * sizeof(T)));
  const auto got = static_cast<uint64_t>(in.gcount());
  if (got != count * sizeof(T)) {
    throw FormatError(path, start + got,
                      "payload truncated: expected " + std::to_string(count * sizeof(T)) + " bytes, found " +
                          std::to_string(got));
  }
  if (in.peek() != std::char_traits<char>::eof()) throw FormatError(path, start + got, "trailing bytes after payload");
}

std::ifstream open_in(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(path, 0, "cannot open file");
  return in;
}

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error(path.string() + ": cannot open for writing");
  return out;
}

}  // namespace

void write_rtf(const std::filesystem::path& path, const MediaClip& clip) {
  clip.validate();
  auto out = open_out(path);
  out << "RTF1 " << clip.t << ' ' << clip.c << ' ' << clip.h << ' ' << clip.w << ' ' << clip.fps << '\n';
  out.write(reinterpret_cast<const char*>(clip.pixels.data()), static_cast<std::streamsize>(clip.pixels.size() * 4));
  if (!out) throw std::runtime_error(path.string() + ": write failed");
}

MediaClip read_rtf(const std::filesystem::path& path) {
  auto in = open_in(path);
  const auto v = read_header(in, path, "RTF1", 5);
  MediaClip clip;
  clip.t = static_cast<int>(v[0]);
  clip.c = static_cast<int>(v[1]);
  clip.h = static_cast<int>(v[2]);
  clip.w = static_cast<int>(v[3]);
  clip.fps = static_cast<int>(v[4]);
  if (clip.t == 0 || clip.c == 0 || clip.h == 0 || clip.w == 0 || clip.fps == 0)
    throw FormatError(path, 0, "header dimensions must be positive");
  clip.kind = clip.t == 1 ? MediaKind::image : MediaKind::video;
  read_payload(in, path, clip.pixels, clip.size());
  return clip;
}

void write_vgf(const std::filesystem::path& path, const VisionGrid& grid) {
  grid.validate();
  auto out = open_out(path);
  out << "VGF1 " << grid.t << ' ' << grid.h << ' ' << grid.w << ' ' << grid.codebook_size << ' ' << grid.ct << ' '
      << grid.cs << ' ' << grid.fps << '\n';
  std::vector<uint32_t> raw(grid.indices.begin(), grid.indices.end());
  out.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size() * 4));
  if (!out) throw std::runtime_error(path.string() + ": write failed");
}

VisionGrid read_vgf(const std::filesystem::path& path) {
  auto in = open_in(path);
  const auto v = read_header(in, path, "VGF1", 7);
  VisionGrid g;
  g.t = static_cast<int>(v[0]);
  g.h = static_cast<int>(v[1]);
  g.w = static_cast<int>(v[2]);
  g.codebook_size = static_cast<int>(v[3]);
  g.ct = static_cast<int>(v[4]);
  g.cs = static_cast<int>(v[5]);
  g.fps = static_cast<int>(v[6]);
  g.kind = (g.ct > 1 || g.t > 1) ? MediaKind::video : MediaKind::image;
  std::vector<uint32_t> raw;
  read_payload(in, path, raw, g.size());
  g.indices.assign(raw.begin(), raw.end());
  try {
    g.validate();
  } catch (const std::exception& e) {
    throw FormatError(path, 0, e.what());
  }
  return g;
}

}  // namespace mmt::vq
