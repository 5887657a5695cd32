#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "codec_fixtures.hpp"
#include "mmt/codec/codec.hpp"

using namespace mmt;
using namespace mmt::codec;

namespace {

const VocabLayout kLayout = layout_vocab(256, 64);

vq::VisionGrid grid(int t, int h, int w, bool video, std::vector<int32_t> idx) {
  vq::VisionGrid g;
  g.t = t, g.h = h, g.w = w, g.codebook_size = 64, g.cs = 4, g.fps = video ? 8 : 1;
  g.ct = video ? 2 : 1;
  g.kind = video ? vq::MediaKind::video : vq::MediaKind::image;
  g.indices = std::move(idx);
  return g;
}

int64_t parse_error_offset(const std::vector<int32_t>& toks) {
  try {
    parse_document(toks, kLayout);
  } catch (const ParseError& e) {
    return static_cast<int64_t>(e.offset());
  }
  return -1;
}

}  // namespace

TEST(Layout, DeskArithmetic) {
  EXPECT_EQ(kLayout.total(), 328);
  EXPECT_EQ(kLayout.vision_base(), 264);
  EXPECT_EQ(kLayout.vision_id(0), 264);
  EXPECT_EQ(kLayout.split(264), std::make_pair(Region::vision, 0));
  EXPECT_EQ(kLayout.pad(), 256);
  EXPECT_EQ(kLayout.eof(), 263);
}

TEST(Layout, RegionMappingIsBijective) {
  for (int32_t id = 0; id < kLayout.total(); ++id) {
    auto [r, off] = kLayout.split(id);
    EXPECT_EQ(kLayout.join(r, off), id);
  }
  EXPECT_THROW(kLayout.region_of(328), std::out_of_range);
  EXPECT_THROW(kLayout.region_of(-1), std::out_of_range);
  EXPECT_THROW(layout_vocab(0, 64), std::invalid_argument);
  EXPECT_THROW(layout_vocab(256, 1), std::invalid_argument);
}

TEST(Layout, LargeVocabularyConsistency) {
  // 184622 total with 32768 vision ids and 8 specials leaves a 151846-id
  // text region, inside the range of a large BPE vocabulary.
  const auto large = layout_vocab(184622 - 32768 - kSpecialCount, 32768);
  EXPECT_EQ(large.total(), 184622);
}

TEST(FlattenGrid, ImageTwoByTwo) {
  auto s = flatten_grid(grid(1, 2, 2, false, {0, 1, 2, 3}), kLayout);
  EXPECT_EQ(s, (std::vector<int32_t>{264, 265, 262, 266, 267, 262}));
}

TEST(FlattenGrid, VideoTwoFrames) {
  auto s = flatten_grid(grid(2, 1, 2, true, {5, 6, 7, 8}), kLayout);
  EXPECT_EQ(s, (std::vector<int32_t>{269, 270, 262, 263, 271, 272, 262, 263}));
}

TEST(FlattenGrid, LargeImageLength) {
  vq::VisionGrid g = grid(1, 64, 64, false, std::vector<int32_t>(4096, 0));
  g.codebook_size = 32768;
  EXPECT_EQ(flatten_grid(g, layout_vocab(256, 32768)).size(), 4160u);
}

TEST(FlattenGrid, RejectsOutOfRangeIndex) {
  auto g = grid(1, 1, 2, false, {0, 64});
  EXPECT_THROW(flatten_grid(g, kLayout), std::out_of_range);
}

TEST(Meta, Formats) {
  EXPECT_EQ(format_meta(1, 512, 512, 1, vq::MediaKind::image), "512x512");
  EXPECT_EQ(format_meta(120, 512, 512, 24, vq::MediaKind::video), "512x512,24fps,5s");
  EXPECT_EQ(format_meta(1, 32, 32, 1, vq::MediaKind::image), "32x32");
  EXPECT_EQ(format_meta(grid(1, 8, 8, false, std::vector<int32_t>(64, 0))), "32x32");
}

TEST(Assemble, MinimalGenerationDocument) {
  auto d = assemble_document({}, grid(1, 1, 1, false, {3}), kLayout, Mode::generation);
  // BOS SOV "4x4" SOT v EOL EOV EOS
  std::vector<int32_t> expect{kLayout.bos(), kLayout.sov(), '4', 'x', '4', kLayout.sot(), 267, kLayout.eol(), kLayout.eov(), kLayout.eos()};
  EXPECT_EQ(d.tokens, expect);
  EXPECT_EQ(d.weights, (std::vector<float>{0, 1, 1, 1, 1, 1, 0.5f, 0.5f, 1, 1}));
  auto p = parse_document(d.tokens, kLayout);
  EXPECT_TRUE(p.caption.empty());
  EXPECT_EQ(p.meta, "4x4");
  EXPECT_EQ(p.mode, Mode::generation);
  EXPECT_EQ(p.codes, (std::vector<int32_t>{3}));
}

TEST(Assemble, UnderstandingModeNeedsCaption) {
  EXPECT_THROW(assemble_document({}, grid(1, 1, 1, false, {0}), kLayout, Mode::understanding), std::invalid_argument);
  EXPECT_THROW(assemble_document(std::vector<int32_t>{300}, grid(1, 1, 1, false, {0}), kLayout, Mode::generation), std::out_of_range);
  vq::VisionGrid empty;
  empty.codebook_size = 64;
  EXPECT_THROW(assemble_document({}, empty, kLayout, Mode::generation), std::invalid_argument);
}

TEST(Assemble, WeightProperties) {
  Rng rng(1);
  for (int i = 0; i < 300; ++i) {
    const auto mode = mmt::testing::random_mode(rng);
    const auto cap = mmt::testing::random_caption(rng, 1, 10);
    const auto g = mmt::testing::random_grid(rng, 64, rng.below(2) == 1);
    const auto d = assemble_document(cap, g, kLayout, mode);
    const auto stream_len = flatten_grid(g, kLayout).size();
    ASSERT_EQ(d.weights.size(), d.tokens.size());
    ASSERT_EQ(d.weights[0], 0.0f);
    size_t half = 0;
    double vision_sum = 0;
    for (size_t k = 1; k < d.size(); ++k) {
      const bool vis = d.segments[k] == Segment::vision;
      ASSERT_EQ(vis, kLayout.in_vision_stream(d.tokens[k]));
      if (d.weights[k] == 0.5f) ++half;
      if (vis) vision_sum += d.weights[k];
      if (d.segments[k] == Segment::caption) {
        ASSERT_EQ(d.weights[k], 1.0f);
      }
    }
    if (mode == Mode::generation) {
      ASSERT_EQ(half, stream_len);
    } else {
      ASSERT_EQ(vision_sum, 0.0);
      ASSERT_EQ(d.weights.back(), 1.0f);
    }
  }
}

TEST(Parse, RandomRoundTrip) {
  Rng rng(2);
  for (int i = 0; i < 1000; ++i) {
    const auto mode = mmt::testing::random_mode(rng);
    const auto cap = mmt::testing::random_caption(rng, mode == Mode::understanding ? 1 : 0, 12);
    const auto g = mmt::testing::random_grid(rng, 64, rng.below(2) == 1);
    const auto p = parse_document(assemble_document(cap, g, kLayout, mode).tokens, kLayout);
    ASSERT_EQ(p.caption, cap);
    ASSERT_EQ(p.meta, format_meta(g));
    ASSERT_EQ(p.mode, mode);
    ASSERT_EQ(p.t, g.t);
    ASSERT_EQ(p.h, g.h);
    ASSERT_EQ(p.w, g.w);
    ASSERT_EQ(p.video, g.kind == vq::MediaKind::video);
    ASSERT_EQ(p.codes, g.indices);
  }
}

TEST(Parse, MissingEovReportsOffset) {
  auto d = assemble_document(encode_text("hi"), grid(1, 2, 2, false, {0, 1, 2, 3}), kLayout, Mode::generation);
  auto toks = d.tokens;
  toks.erase(toks.end() - 2);
  EXPECT_EQ(parse_error_offset(toks), static_cast<int64_t>(toks.size()) - 1);
}

TEST(Parse, RaggedRows) {
  auto d = assemble_document({}, grid(1, 2, 3, false, {0, 1, 2, 3, 4, 5}), kLayout, Mode::generation);
  auto toks = d.tokens;
  // drop the last code of the second row: widths 3 then 2
  const auto sot = std::find(toks.begin(), toks.end(), kLayout.sot()) - toks.begin();
  toks.erase(toks.begin() + sot + 1 + 4 + 2);
  try {
    parse_document(toks, kLayout);
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find("inconsistent row width"), std::string::npos);
    EXPECT_EQ(e.offset(), static_cast<size_t>(sot + 1 + 4 + 2));
  }
}

TEST(Parse, StructuralViolations) {
  auto base = assemble_document(encode_text("ab"), grid(2, 1, 2, true, {0, 1, 2, 3}), kLayout, Mode::generation).tokens;
  auto t = base;
  t[0] = 'x';
  EXPECT_EQ(parse_error_offset(t), 0);
  t = base;
  t.back() = kLayout.eov();
  EXPECT_GE(parse_error_offset(t), 0);
  t = base;
  t.insert(t.begin() + 2, kLayout.sov());
  EXPECT_EQ(parse_error_offset(t), 4);  // second occurrence
  // last frame left without its EOF
  t = base;
  t.erase(t.end() - 3);
  EXPECT_GE(parse_error_offset(t), 0);
  t = base;
  t[t.size() - 4] = 'q';  // text inside the vision stream
  EXPECT_GE(parse_error_offset(t), 0);
  EXPECT_GE(parse_error_offset({kLayout.bos(), kLayout.eos()}), 0);
}

TEST(Pack, HandTracedFirstFitDecreasing) {
  auto mk = [](size_t n) {
    Document d;
    d.tokens.assign(n, 1);
    d.weights.assign(n, 1.0f);
    return d;
  };
  std::vector<Document> docs{mk(6), mk(6), mk(4)};
  auto b = pack(docs, 10, kLayout);
  ASSERT_EQ(b.rows.size(), 2u);
  EXPECT_EQ(b.rows[0].docs.size(), 2u);
  EXPECT_EQ(b.rows[0].docs[0].doc, 0);
  EXPECT_EQ(b.rows[0].docs[1].doc, 2);
  EXPECT_EQ(b.rows[0].docs[1].offset, 6);
  EXPECT_EQ(b.rows[1].docs[0].doc, 1);
  EXPECT_EQ(b.rows[1].tokens[6], kLayout.pad());
  EXPECT_EQ(b.rows[1].weights[6], 0.0f);

  auto full = pack(std::vector<Document>{mk(10)}, 10, kLayout);
  ASSERT_EQ(full.rows.size(), 1u);
  EXPECT_EQ(std::count(full.rows[0].tokens.begin(), full.rows[0].tokens.end(), kLayout.pad()), 0);

  auto rej = pack(std::vector<Document>{mk(11), mk(3)}, 10, kLayout);
  EXPECT_EQ(rej.rejected, (std::vector<int32_t>{0}));
  EXPECT_EQ(rej.rows.size(), 1u);
}

TEST(Pack, RandomPropertiesHold) {
  Rng rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<Document> docs;
    const int n = 1 + static_cast<int>(rng.below(30));
    for (int i = 0; i < n; ++i) docs.push_back(mmt::testing::random_document(rng, kLayout));
    const int L = 40 + static_cast<int>(rng.below(80));
    auto b = pack(docs, L, kLayout);
    std::vector<int> seen(n, 0);
    int64_t accepted = 0;
    for (const auto& row : b.rows) {
      ASSERT_EQ(row.tokens.size(), static_cast<size_t>(L));
      int32_t covered = 0;
      for (const auto& d : row.docs) {
        ++seen[d.doc];
        ASSERT_EQ(d.offset, covered);
        covered += d.length;
        ASSERT_TRUE(std::equal(docs[d.doc].tokens.begin(), docs[d.doc].tokens.end(), row.tokens.begin() + d.offset));
      }
      ASSERT_LE(covered, L);
      for (int32_t i = covered; i < L; ++i) {
        ASSERT_EQ(row.tokens[i], kLayout.pad());
        ASSERT_EQ(row.weights[i], 0.0f);
      }
    }
    for (int i = 0; i < n; ++i) {
      const bool too_long = docs[i].size() > static_cast<size_t>(L);
      ASSERT_EQ(seen[i], too_long ? 0 : 1);
      ASSERT_EQ(std::count(b.rejected.begin(), b.rejected.end(), i), too_long ? 1 : 0);
      if (!too_long) accepted += static_cast<int64_t>(docs[i].size());
    }
    ASSERT_EQ(b.non_pad_tokens(), accepted);
  }
}

TEST(Pack, KeyStartsFollowDocuments) {
  PackedRow row;
  row.tokens.assign(8, 1);
  row.docs = {{0, 0, 3, Mode::generation}, {1, 3, 2, Mode::generation}};
  EXPECT_EQ(key_starts(row), (std::vector<int32_t>{0, 0, 0, 3, 3, 5, 6, 7}));
}

TEST(Dataset, SaveLoadIsBitExact) {
  Rng rng(4);
  std::vector<Document> docs;
  for (int i = 0; i < 20; ++i) docs.push_back(mmt::testing::random_document(rng, kLayout));
  Dataset ds{kLayout, pack(docs, 64, kLayout), R"({"documents":20})"};
  auto p = std::filesystem::temp_directory_path() / "mmt_test_codec" / "d.bin";
  save_dataset(p, ds);
  auto back = load_dataset(p);
  EXPECT_TRUE(back.batch == ds.batch);
  EXPECT_EQ(back.layout, kLayout);
  EXPECT_EQ(back.stats_json, ds.stats_json);

  std::ifstream in(p, std::ios::binary);
  std::string bytes((std::istreambuf_iterator<char>(in)), {});
  std::ofstream(p, std::ios::binary | std::ios::trunc) << bytes.substr(0, bytes.size() - 5);
  EXPECT_THROW(load_dataset(p), io::FormatError);
}

TEST(Dataset, EmptyDatasetRoundTrips) {
  Dataset ds{kLayout, pack(std::vector<Document>{}, 16, kLayout), "{}"};
  auto p = std::filesystem::temp_directory_path() / "mmt_test_codec" / "e.bin";
  save_dataset(p, ds);
  EXPECT_TRUE(load_dataset(p).batch == ds.batch);
}
