#include "mmt/codec/codec.hpp"

#include <algorithm>
#include <numeric>

#include "mmt/log.hpp"

namespace mmt::codec {

Region VocabLayout::region_of(int32_t id) const { return split(id).first; }

std::pair<Region, int32_t> VocabLayout::split(int32_t id) const {
  if (id < 0 || id >= total()) throw std::out_of_range("token id " + std::to_string(id) + " outside vocabulary of " + std::to_string(total()));
  if (id < text_size) return {Region::text, id};
  if (id < vision_base()) return {Region::special, id - text_size};
  return {Region::vision, id - vision_base()};
}

int32_t VocabLayout::join(Region region, int32_t offset) const {
  const int32_t size = region == Region::text ? text_size : region == Region::special ? kSpecialCount : codebook_size;
  if (offset < 0 || offset >= size) throw std::out_of_range("offset " + std::to_string(offset) + " outside region of size " + std::to_string(size));
  switch (region) {
    case Region::text:
      return offset;
    case Region::special:
      return text_size + offset;
    case Region::vision:
      return vision_base() + offset;
  }
  return -1;
}

bool VocabLayout::in_vision_stream(int32_t id) const { return id >= vision_base() ? id < total() : id == eol() || id == eof(); }

VocabLayout layout_vocab(int32_t text_size, int32_t codebook_size) {
  if (text_size < 1) throw std::invalid_argument("text size must be at least 1");
  if (codebook_size < 2) throw std::invalid_argument("codebook size must be at least 2");
  return VocabLayout{text_size, codebook_size};
}

std::vector<int32_t> encode_text(std::string_view text) {
  std::vector<int32_t> out;
  out.reserve(text.size());
  for (char c : text) out.push_back(static_cast<uint8_t>(c));
  return out;
}

std::string decode_text(std::span<const int32_t> ids) {
  std::string out;
  out.reserve(ids.size());
  for (int32_t id : ids) {
    if (id < 0 || id > 255) throw std::out_of_range("id " + std::to_string(id) + " is not a byte token");
    out.push_back(static_cast<char>(id));
  }
  return out;
}

std::vector<int32_t> flatten_grid(const vq::VisionGrid& grid, const VocabLayout& layout) {
  grid.validate();
  if (grid.codebook_size > layout.codebook_size)
    throw std::out_of_range("grid codebook " + std::to_string(grid.codebook_size) + " exceeds layout codebook " +
                            std::to_string(layout.codebook_size));
  std::vector<int32_t> out;
  const bool video = grid.kind == vq::MediaKind::video;
  out.reserve(grid.size() + static_cast<size_t>(grid.t) * (grid.h + (video ? 1 : 0)));
  size_t i = 0;
  for (int f = 0; f < grid.t; ++f) {
    for (int y = 0; y < grid.h; ++y) {
      for (int x = 0; x < grid.w; ++x) out.push_back(layout.vision_id(grid.indices[i++]));
      out.push_back(layout.eol());
    }
    if (video) out.push_back(layout.eof());
  }
  return out;
}

std::string format_meta(int t, int h, int w, int fps, vq::MediaKind kind) {
  if (t <= 0 || h <= 0 || w <= 0 || fps <= 0) throw std::invalid_argument("meta: dimensions must be positive");
  std::string s = std::to_string(h) + "x" + std::to_string(w);
  if (kind == vq::MediaKind::video) s += "," + std::to_string(fps) + "fps," + std::to_string((t + fps - 1) / fps) + "s";
  return s;
}

std::string format_meta(const vq::VisionGrid& grid) {
  return format_meta(grid.source_t(), grid.source_h(), grid.source_w(), grid.fps, grid.kind);
}

const char* mode_name(Mode m) { return m == Mode::generation ? "generation" : "understanding"; }

Mode parse_mode(std::string_view s) {
  if (s == "generation") return Mode::generation;
  if (s == "understanding") return Mode::understanding;
  throw std::invalid_argument("unknown mode '" + std::string(s) + "'");
}

Document assemble_document(std::span<const int32_t> caption, const vq::VisionGrid& grid, const VocabLayout& layout, Mode mode) {
  if (grid.size() == 0) throw std::invalid_argument("assemble: empty grid");
  for (int32_t id : caption)
    if (id < 0 || id >= layout.text_size) throw std::out_of_range("assemble: caption id " + std::to_string(id) + " outside text region");
  if (mode == Mode::understanding && caption.empty()) throw std::invalid_argument("assemble: understanding mode needs a caption");
  const auto stream = flatten_grid(grid, layout);
  const auto meta = encode_text(format_meta(grid));
  for (int32_t id : meta)
    if (id >= layout.text_size) throw std::out_of_range("assemble: text region too small for meta text");

  Document d;
  d.mode = mode;
  const float vision_w = mode == Mode::generation ? kVisionWeight : 0.0f;
  auto push = [&](int32_t id, float w, Segment s) {
    d.tokens.push_back(id);
    d.weights.push_back(w);
    d.segments.push_back(s);
  };
  auto push_caption = [&] {
    for (int32_t id : caption) push(id, 1.0f, Segment::caption);
  };
  push(layout.bos(), 0.0f, Segment::structural);
  if (mode == Mode::generation) push_caption();
  push(layout.sov(), 1.0f, Segment::structural);
  for (int32_t id : meta) push(id, 1.0f, Segment::meta);
  push(layout.sot(), 1.0f, Segment::structural);
  for (int32_t id : stream) push(id, vision_w, Segment::vision);
  push(layout.eov(), 1.0f, Segment::structural);
  if (mode == Mode::understanding) push_caption();
  push(layout.eos(), 1.0f, Segment::structural);
  return d;
}

StreamDims parse_vision_stream(std::span<const int32_t> stream, const VocabLayout& layout, size_t base) {
  if (stream.empty()) throw ParseError(base, "empty vision stream");
  StreamDims d;
  int row_len = 0, rows_in_frame = 0, frames = 0, rows_total = 0;
  bool saw_eof = false;
  for (size_t i = 0; i < stream.size(); ++i) {
    const int32_t id = stream[i];
    const size_t at = base + i;
    if (id < 0 || id >= layout.total()) throw ParseError(at, "token id " + std::to_string(id) + " outside vocabulary");
    if (id >= layout.vision_base()) {
      ++row_len;
    } else if (id == layout.eol()) {
      if (row_len == 0) throw ParseError(at, "empty row");
      if (d.w == 0) d.w = row_len;
      if (row_len != d.w) throw ParseError(at, "inconsistent row width");
      row_len = 0;
      ++rows_in_frame;
      ++rows_total;
    } else if (id == layout.eof()) {
      if (row_len != 0) throw ParseError(at, "frame break inside a row");
      if (rows_in_frame == 0) throw ParseError(at, "empty frame");
      if (d.h == 0) d.h = rows_in_frame;
      if (rows_in_frame != d.h) throw ParseError(at, "inconsistent frame height");
      rows_in_frame = 0;
      ++frames;
      saw_eof = true;
    } else {
      throw ParseError(at, "unexpected token " + std::to_string(id) + " in vision stream");
    }
  }
  const size_t end = base + stream.size();
  if (row_len != 0) throw ParseError(end, "row not terminated by EOL");
  if (saw_eof) {
    if (rows_in_frame != 0) throw ParseError(end, "frame not terminated by EOF");
    d.t = frames;
    d.video = true;
  } else {
    d.t = 1;
    d.h = rows_total;
  }
  return d;
}

ParsedDocument parse_document(std::span<const int32_t> tokens, const VocabLayout& layout) {
  const size_t n = tokens.size();
  if (n == 0) throw ParseError(0, "empty document");
  for (size_t i = 0; i < n; ++i)
    if (tokens[i] < 0 || tokens[i] >= layout.total()) throw ParseError(i, "token id " + std::to_string(tokens[i]) + " outside vocabulary");
  if (tokens[0] != layout.bos()) throw ParseError(0, "missing BOS");
  if (tokens[n - 1] != layout.eos()) throw ParseError(n - 1, "missing EOS");

  auto find_unique = [&](int32_t id, const char* name) {
    size_t pos = n;
    for (size_t i = 0; i < n; ++i) {
      if (tokens[i] != id) continue;
      if (pos != n) throw ParseError(i, std::string("duplicate ") + name);
      pos = i;
    }
    return pos;
  };
  for (size_t i = 1; i + 1 < n; ++i) {
    if (tokens[i] == layout.bos()) throw ParseError(i, "duplicate BOS");
    if (tokens[i] == layout.eos()) throw ParseError(i, "EOS before end of document");
    if (tokens[i] == layout.pad()) throw ParseError(i, "PAD inside document");
  }
  const size_t sov = find_unique(layout.sov(), "SOV");
  const size_t sot = find_unique(layout.sot(), "SOT");
  const size_t eov = find_unique(layout.eov(), "EOV");
  if (sov == n) throw ParseError(n - 1, "missing SOV");
  if (sot == n) throw ParseError(n - 1, "missing SOT");
  if (eov == n) throw ParseError(n - 1, "missing EOV");
  if (sot < sov) throw ParseError(sot, "SOT before SOV");
  if (eov < sot) throw ParseError(eov, "EOV before SOT");

  ParsedDocument p;
  auto take_text = [&](size_t from, size_t to, std::vector<int32_t>& dst) {
    for (size_t i = from; i < to; ++i) {
      if (tokens[i] >= layout.text_size) throw ParseError(i, "non-text token in text segment");
      dst.push_back(tokens[i]);
    }
  };
  const bool text_before = sov > 1, text_after = eov + 2 < n;
  if (text_before && text_after) throw ParseError(eov + 1, "caption on both sides of the vision segment");
  p.mode = text_after ? Mode::understanding : Mode::generation;
  if (text_before) take_text(1, sov, p.caption);
  if (text_after) take_text(eov + 1, n - 1, p.caption);

  std::vector<int32_t> meta;
  take_text(sov + 1, sot, meta);
  if (meta.empty()) throw ParseError(sot, "missing meta text");
  p.meta = decode_text(meta);

  const auto stream = tokens.subspan(sot + 1, eov - sot - 1);
  const StreamDims d = parse_vision_stream(stream, layout, sot + 1);
  p.t = d.t;
  p.h = d.h;
  p.w = d.w;
  p.video = d.video;
  for (int32_t id : stream)
    if (id >= layout.vision_base()) p.codes.push_back(id - layout.vision_base());
  return p;
}

int64_t PackedBatch::non_pad_tokens() const {
  int64_t n = 0;
  for (const auto& r : rows)
    for (const auto& d : r.docs) n += d.length;
  return n;
}

bool operator==(const PackedDoc& a, const PackedDoc& b) {
  return a.doc == b.doc && a.offset == b.offset && a.length == b.length && a.mode == b.mode;
}

bool PackedBatch::operator==(const PackedBatch& o) const {
  if (context_length != o.context_length || rejected != o.rejected || rows.size() != o.rows.size()) return false;
  for (size_t i = 0; i < rows.size(); ++i)
    if (rows[i].tokens != o.rows[i].tokens || rows[i].weights != o.rows[i].weights || rows[i].docs != o.rows[i].docs) return false;
  return true;
}

PackedBatch pack(std::span<const Document> docs, int32_t L, const VocabLayout& layout) {
  if (L < 1) throw std::invalid_argument("pack: context length must be positive");
  PackedBatch b;
  b.context_length = L;
  std::vector<int32_t> order(docs.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int32_t a, int32_t c) { return docs[a].size() > docs[c].size(); });
  std::vector<int32_t> used;
  for (int32_t i : order) {
    const auto len = static_cast<int64_t>(docs[i].size());
    if (docs[i].weights.size() != docs[i].tokens.size()) throw std::invalid_argument("pack: document weights/tokens length mismatch");
    if (len > L) {
      log_warn("pack: document " + std::to_string(i) + " of length " + std::to_string(len) + " exceeds context " + std::to_string(L) +
               "; rejected");
      b.rejected.push_back(i);
      continue;
    }
    if (len == 0) continue;
    size_t r = 0;
    while (r < used.size() && used[r] + len > L) ++r;
    if (r == used.size()) {
      used.push_back(0);
      b.rows.emplace_back();
    }
    auto& row = b.rows[r];
    row.docs.push_back({i, used[r], static_cast<int32_t>(len), docs[i].mode});
    row.tokens.insert(row.tokens.end(), docs[i].tokens.begin(), docs[i].tokens.end());
    row.weights.insert(row.weights.end(), docs[i].weights.begin(), docs[i].weights.end());
    used[r] += static_cast<int32_t>(len);
  }
  for (auto& row : b.rows) {
    row.tokens.resize(L, layout.pad());
    row.weights.resize(L, 0.0f);
  }
  std::sort(b.rejected.begin(), b.rejected.end());
  return b;
}

std::vector<int32_t> key_starts(const PackedRow& row) {
  std::vector<int32_t> ks(row.tokens.size());
  std::iota(ks.begin(), ks.end(), 0);
  for (const auto& d : row.docs)
    for (int32_t i = d.offset; i < d.offset + d.length; ++i) ks[i] = d.offset;
  return ks;
}

}  // namespace mmt::codec
