#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "mmt/codec/codec.hpp"
#include "mmt/train/training.hpp"

namespace mmt::train {

// Memorization set: item i = 8a + b has caption "<a><b>" (two letters) and
// an h x w image grid whose every row reads code (i + x) mod K at column x.
struct SyntheticPair {
  std::vector<int32_t> caption;
  vq::VisionGrid grid;
};
std::vector<SyntheticPair> overfit_pairs(const codec::VocabLayout& layout, int count, int h, int w);
std::vector<codec::Document> overfit_documents(const codec::VocabLayout& layout, int count, int h, int w,
                                               codec::Mode mode = codec::Mode::generation);

// Generation document -> (BOS caption SOV meta SOT, vision stream).
std::pair<std::vector<int32_t>, std::vector<int32_t>> split_generation(const codec::Document& doc,
                                                                       const codec::VocabLayout& layout);

// Chosen responses are clean overfit-pattern streams; rejected ones replace
// every code with a random code of the same grid.
std::vector<PreferenceTriplet> synthetic_triplets(const codec::VocabLayout& layout, int count, int h, int w, uint64_t seed);

}  // namespace mmt::train
