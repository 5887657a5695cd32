#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "mmt/vq/media.hpp"

namespace mmt::codec {

enum class Region { text, special, vision };

// Special ids occupy [T, T + 8) in this order.
enum class Special : int32_t { pad = 0, bos, eos, sov, sot, eov, eol, eof };
inline constexpr int32_t kSpecialCount = 8;

struct VocabLayout {
  int32_t text_size = 256;
  int32_t codebook_size = 64;

  int32_t special(Special s) const { return text_size + static_cast<int32_t>(s); }
  int32_t pad() const { return special(Special::pad); }
  int32_t bos() const { return special(Special::bos); }
  int32_t eos() const { return special(Special::eos); }
  int32_t sov() const { return special(Special::sov); }
  int32_t sot() const { return special(Special::sot); }
  int32_t eov() const { return special(Special::eov); }
  int32_t eol() const { return special(Special::eol); }
  int32_t eof() const { return special(Special::eof); }
  int32_t vision_base() const { return text_size + kSpecialCount; }
  int32_t total() const { return vision_base() + codebook_size; }

  // Throws std::out_of_range for ids outside [0, total).
  Region region_of(int32_t id) const;
  std::pair<Region, int32_t> split(int32_t id) const;  // (region, offset within it)
  int32_t join(Region region, int32_t offset) const;
  int32_t vision_id(int32_t code) const { return join(Region::vision, code); }
  bool in_vision_stream(int32_t id) const;  // codebook ids, EOL, EOF

  bool operator==(const VocabLayout&) const = default;
};

VocabLayout layout_vocab(int32_t text_size, int32_t codebook_size);

// Byte-level text tokenizer over the first 256 ids.
std::vector<int32_t> encode_text(std::string_view text);
std::string decode_text(std::span<const int32_t> ids);

// Row-major per frame; EOL after each row, EOF after each frame of a video.
std::vector<int32_t> flatten_grid(const vq::VisionGrid& grid, const VocabLayout& layout);

// "HxW" for images, "HxW,FPSfps,SECs" for videos with SEC = ceil(frames / fps).
std::string format_meta(int t, int h, int w, int fps, vq::MediaKind kind);
std::string format_meta(const vq::VisionGrid& grid);

enum class Mode { generation, understanding };
enum class Segment : uint8_t { caption, meta, vision, structural };

const char* mode_name(Mode m);
Mode parse_mode(std::string_view s);

inline constexpr float kVisionWeight = 0.5f;

// weights[i] is the loss weight of predicting tokens[i] from its prefix, so
// weights[0] (BOS) is always 0 and the target sequence is tokens[1:].
struct Document {
  std::vector<int32_t> tokens;
  std::vector<float> weights;
  std::vector<Segment> segments;
  Mode mode = Mode::generation;

  size_t size() const { return tokens.size(); }
};

// generation:    BOS caption SOV meta SOT vision EOV EOS
// understanding: BOS SOV meta SOT vision EOV caption EOS
// Understanding mode needs a non-empty caption, otherwise the two layouts
// coincide.
Document assemble_document(std::span<const int32_t> caption, const vq::VisionGrid& grid, const VocabLayout& layout, Mode mode);

class ParseError : public std::runtime_error {
 public:
  ParseError(size_t offset, const std::string& what)
      : std::runtime_error("offset " + std::to_string(offset) + ": " + what), offset_(offset) {}
  size_t offset() const { return offset_; }

 private:
  size_t offset_;
};

struct ParsedDocument {
  std::vector<int32_t> caption;
  std::string meta;
  int t = 0, h = 0, w = 0;  // grid dims recovered from EOL / EOF layout
  bool video = false;       // true when frames end in EOF
  std::vector<int32_t> codes;
  Mode mode = Mode::generation;
};

// Exact inverse of assemble_document on its range. Structural violations
// throw ParseError carrying the offending token offset.
ParsedDocument parse_document(std::span<const int32_t> tokens, const VocabLayout& layout);

// Checks only the vision stream between SOT and EOV: returns (t, h, w, video).
struct StreamDims {
  int t = 0, h = 0, w = 0;
  bool video = false;
};
StreamDims parse_vision_stream(std::span<const int32_t> stream, const VocabLayout& layout, size_t base_offset = 0);

struct PackedDoc {
  int32_t doc = 0;  // index into the packed document list
  int32_t offset = 0;
  int32_t length = 0;
  Mode mode = Mode::generation;
};

struct PackedRow {
  std::vector<int32_t> tokens;
  std::vector<float> weights;
  std::vector<PackedDoc> docs;
};

struct PackedBatch {
  int32_t context_length = 0;
  std::vector<PackedRow> rows;
  std::vector<int32_t> rejected;  // documents longer than the context

  int64_t non_pad_tokens() const;
  bool operator==(const PackedBatch&) const;
};

// First-fit-decreasing by length (ties keep input order); PAD fill with
// weight 0. Oversize documents are rejected with a warning.
PackedBatch pack(std::span<const Document> docs, int32_t context_length, const VocabLayout& layout);

// First allowed key for every position of a row: the start of its document,
// or the position itself for PAD.
std::vector<int32_t> key_starts(const PackedRow& row);

bool operator==(const PackedDoc& a, const PackedDoc& b);

// Dataset file:
//   "PKD1 " + JSON header {context_length, rows, text_size, codebook_size,
//   stats...} + "\n"
//   per row: L int32 tokens, L float32 weights, u32 doc count,
//   then per doc: i32 doc, i32 offset, i32 length, u8 mode.
struct Dataset {
  VocabLayout layout;
  PackedBatch batch;
  std::string stats_json = "{}";
};

void save_dataset(const std::filesystem::path& path, const Dataset& ds);
Dataset load_dataset(const std::filesystem::path& path);

}  // namespace mmt::codec
