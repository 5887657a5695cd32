#include "mmt/train/synthetic.hpp"

#include <algorithm>
#include <stdexcept>

#include "mmt/rng.hpp"

namespace mmt::train {

std::vector<SyntheticPair> overfit_pairs(const codec::VocabLayout& layout, int count, int h, int w) {
  if (count < 1 || count > 64) throw std::invalid_argument("overfit set: count must be in [1, 64]");
  if (h < 1 || w < 1) throw std::invalid_argument("overfit set: grid must be non-empty");
  std::vector<SyntheticPair> out;
  const int K = layout.codebook_size;
  for (int i = 0; i < count; ++i) {
    SyntheticPair p;
    p.caption = codec::encode_text(std::string{static_cast<char>('a' + i / 8), static_cast<char>('a' + i % 8)});
    p.grid.h = h;
    p.grid.w = w;
    p.grid.codebook_size = K;
    p.grid.cs = 4;
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) p.grid.indices.push_back((i + x) % K);
    out.push_back(std::move(p));
  }
  return out;
}

std::vector<codec::Document> overfit_documents(const codec::VocabLayout& layout, int count, int h, int w, codec::Mode mode) {
  std::vector<codec::Document> docs;
  for (const auto& p : overfit_pairs(layout, count, h, w)) docs.push_back(codec::assemble_document(p.caption, p.grid, layout, mode));
  return docs;
}

std::pair<std::vector<int32_t>, std::vector<int32_t>> split_generation(const codec::Document& doc, const codec::VocabLayout& layout) {
  if (doc.mode != codec::Mode::generation) throw std::invalid_argument("split_generation: understanding-mode document");
  const auto sot = std::find(doc.tokens.begin(), doc.tokens.end(), layout.sot());
  const auto eov = std::find(doc.tokens.begin(), doc.tokens.end(), layout.eov());
  if (sot == doc.tokens.end() || eov == doc.tokens.end() || eov < sot) throw std::invalid_argument("split_generation: malformed document");
  return {std::vector<int32_t>(doc.tokens.begin(), sot + 1), std::vector<int32_t>(sot + 1, eov)};
}

std::vector<PreferenceTriplet> synthetic_triplets(const codec::VocabLayout& layout, int count, int h, int w, uint64_t seed) {
  Rng rng(seed);
  std::vector<PreferenceTriplet> out;
  for (const auto& doc : overfit_documents(layout, count, h, w)) {
    auto [prompt, chosen] = split_generation(doc, layout);
    auto rejected = chosen;
    for (auto& id : rejected)
      if (id >= layout.vision_base()) id = layout.vision_id(static_cast<int32_t>(rng.below(static_cast<uint64_t>(layout.codebook_size))));
    out.push_back({std::move(prompt), std::move(chosen), std::move(rejected)});
  }
  return out;
}

}  // namespace mmt::train
