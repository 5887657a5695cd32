#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "mmt/ops.hpp"
#include "mmt/vq/media.hpp"
#include "mmt/vq/metrics.hpp"
#include "mmt/vq/synthetic.hpp"
#include "mmt/vq/tokenizer.hpp"
#include "test_util.hpp"

using namespace mmt;
using namespace mmt::vq;

namespace {

MediaClip constant_clip(int t, int h, int w, float v, MediaKind kind = MediaKind::image) {
  MediaClip c;
  c.t = t;
  c.h = h;
  c.w = w;
  c.kind = kind;
  c.fps = kind == MediaKind::image ? 1 : 8;
  c.pixels.assign(c.size(), v);
  return c;
}

std::filesystem::path temp_file(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "mmt_test_vq";
  std::filesystem::create_directories(dir);
  return dir / name;
}

}  // namespace

TEST(LatentDims, LargeConfigGives4096Positions) {
  auto d = latent_dims(TokenizerConfig::large(), 4, 512, 512, MediaKind::video);
  EXPECT_EQ(d, (LatentDims{1, 64, 64}));
  EXPECT_EQ(d.positions(), 4096);
}

TEST(LatentDims, DeskVideoAndImage) {
  auto cfg = TokenizerConfig::desk();
  EXPECT_EQ(latent_dims(cfg, 2, 32, 32, MediaKind::video), (LatentDims{1, 8, 8}));
  EXPECT_EQ(latent_dims(cfg, 1, 32, 32, MediaKind::image), (LatentDims{1, 8, 8}));
}

TEST(LatentDims, RejectsIndivisible) {
  auto cfg = TokenizerConfig::desk();
  EXPECT_THROW(latent_dims(cfg, 3, 32, 32, MediaKind::video), std::invalid_argument);
  EXPECT_THROW(latent_dims(cfg, 2, 30, 32, MediaKind::video), std::invalid_argument);
  EXPECT_THROW(latent_dims(cfg, 2, 32, 32, MediaKind::image), std::invalid_argument);
  try {
    latent_dims(cfg, 2, 32, 33, MediaKind::video);
    FAIL();
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("width"), std::string::npos);
  }
}

TEST(Quantize, ExactMatchOnRow7) {
  Rng rng(1);
  Tensor cb = mmt::testing::random_tensor({16, 4}, rng, 1.0, false);
  std::vector<Real> z;
  for (int n = 0; n < 5; ++n)
    for (int j = 0; j < 4; ++j) z.push_back(cb.at(7 * 4 + j));
  auto q = quantize(Tensor::from({5, 4}, z), cb);
  for (auto i : q.indices) EXPECT_EQ(i, 7);
  EXPECT_EQ(q.codebook_loss.item(), 0.0);
  EXPECT_EQ(q.commitment_loss.item(), 0.0);
}

TEST(Quantize, TwoEntryHandExample) {
  auto q = quantize(Tensor::from({1, 1}, {0.4f}), Tensor::from({2, 1}, {0.0f, 1.0f}));
  ASSERT_EQ(q.indices.size(), 1u);
  EXPECT_EQ(q.indices[0], 0);
  EXPECT_NEAR(q.commitment_loss.item(), 0.16, 1e-6);
  EXPECT_NEAR(q.codebook_loss.item(), 0.16, 1e-6);
}

TEST(Quantize, TieGoesToLowestIndex) {
  auto q = quantize(Tensor::from({1, 1}, {0.5f}), Tensor::from({3, 1}, {1.0f, 0.0f, 0.0f}));
  EXPECT_EQ(q.indices[0], 0);
  q = quantize(Tensor::from({1, 1}, {0.0f}), Tensor::from({3, 1}, {1.0f, 0.0f, 0.0f}));
  EXPECT_EQ(q.indices[0], 1);
}

TEST(Quantize, MatchesBruteForceOracle) {
  Rng rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    const int K = 2 + static_cast<int>(rng.below(63)), d = 1 + static_cast<int>(rng.below(6)), N = 50;
    Tensor cb = mmt::testing::random_tensor({K, d}, rng, 1.0, false);
    Tensor z = mmt::testing::random_tensor({N, d}, rng, 1.0, false);
    auto q = quantize(z, cb);
    for (int n = 0; n < N; ++n) {
      int best = 0;
      double bd = 1e300;
      for (int k = 0; k < K; ++k) {
        double s = 0;
        for (int j = 0; j < d; ++j) s += std::pow(double(z.at(n * d + j)) - cb.at(k * d + j), 2);
        if (s < bd) bd = s, best = k;
      }
      ASSERT_EQ(q.indices[n], best);
    }
    EXPECT_GE(q.codebook_loss.item(), 0.0);
    EXPECT_GE(q.commitment_loss.item(), 0.0);
  }
}

TEST(Quantize, EmptyCodebookRejected) {
  EXPECT_THROW(quantize(Tensor::from({1, 2}, {0.f, 0.f}), Tensor::zeros({0, 2})), std::invalid_argument);
}

TEST(Quantize, StraightThroughIsIdentity) {
  Rng rng(3);
  Tensor cb = mmt::testing::random_tensor({8, 3}, rng, 1.0, false);
  Tensor z = mmt::testing::random_tensor({6, 3}, rng);
  Tensor r = mmt::testing::random_tensor({6, 3}, rng, 1.0, false);
  Graph g;
  Tensor loss;
  {
    GraphScope s(g);
    loss = mmt::testing::project(quantize(z, cb).z_q, r);
  }
  backward(g, loss);
  for (int64_t i = 0; i < z.numel(); ++i) EXPECT_EQ(z.grad()[i], r.at(i));
}

class RoundTrip : public ::testing::TestWithParam<std::pair<int, int>> {};

TEST_P(RoundTrip, DecodeEncodePreservesShape) {
  auto [ct, cs] = GetParam();
  TokenizerConfig cfg;
  cfg.ct = ct;
  cfg.cs = cs;
  cfg.codebook_size = 16;
  cfg.base_channels = 4;
  VqTokenizer tok(cfg, 5);
  for (auto kind : {MediaKind::video, MediaKind::image}) {
    const int t = kind == MediaKind::video ? 2 * ct : 1;
    MediaClip clip = two_pattern_set(1, t, 2 * cs, 3 * cs, kind, 9)[0];
    VisionGrid g = tok.tokenize(clip);
    const int gt = kind == MediaKind::video ? t / ct : 1;
    EXPECT_EQ(g.size(), static_cast<size_t>(gt * 2 * 3));
    EXPECT_EQ(g.t, gt);
    MediaClip out = tok.detokenize(g);
    EXPECT_EQ(out.t, clip.t);
    EXPECT_EQ(out.h, clip.h);
    EXPECT_EQ(out.w, clip.w);
    for (float p : out.pixels) {
      ASSERT_TRUE(std::isfinite(p));
      ASSERT_GE(p, 0.0f);
      ASSERT_LE(p, 1.0f);
    }
  }
}

INSTANTIATE_TEST_SUITE_P(Factors, RoundTrip, ::testing::Values(std::pair{1, 2}, std::pair{2, 4}, std::pair{4, 8}));

TEST(Tokenizer, DeskGridSizeAndEncoderChannels) {
  VqTokenizer tok(TokenizerConfig::desk(), 1);
  auto clip = two_pattern_set(1, 2, 32, 32, MediaKind::video, 1)[0];
  Tensor z = tok.encode(clip_to_tensor(clip), MediaKind::video);
  EXPECT_EQ(z.shape(), (Shape{1, 4, 1, 8, 8}));
  EXPECT_EQ(tok.tokenize(clip).size(), 64u);
}

TEST(Tokenizer, DetokenizeRejectsBadIndex) {
  VqTokenizer tok(TokenizerConfig::desk(), 1);
  auto g = tok.tokenize(two_pattern_set(1, 1, 32, 32, MediaKind::image, 1)[0]);
  g.indices[3] = 64;
  EXPECT_THROW(tok.detokenize(g), std::out_of_range);
}

TEST(Tokenizer, UsageCountsSumToPositions) {
  TokenizerConfig cfg;
  cfg.base_channels = 4;
  VqTokenizer tok(cfg, 2);
  AdamW opt;
  auto batch = two_pattern_set(2, 2, 16, 16, MediaKind::video, 3);
  for (int i = 0; i < 3; ++i) tok.train_step(batch, opt, 1e-3);
  const auto& u = tok.usage();
  EXPECT_EQ(std::accumulate(u.begin(), u.end(), int64_t{0}), tok.quantize_calls() * 2 * 1 * 4 * 4);
  EXPECT_EQ(tok.positions_quantized(), 3 * 2 * 16);
}

TEST(Tokenizer, LossDecreasesOnFixedBatch) {
  TokenizerConfig cfg;
  cfg.base_channels = 4;
  VqTokenizer tok(cfg, 4);
  AdamW opt;
  auto batch = two_pattern_set(8, 2, 32, 32, MediaKind::video, 4);
  std::vector<double> losses;
  for (int i = 0; i < 200; ++i) {
    auto l = tok.train_step(batch, opt, 2e-3);
    ASSERT_TRUE(std::isfinite(l.total));
    EXPECT_GE(l.codebook, 0.0);
    EXPECT_GE(l.commitment, 0.0);
    EXPECT_NEAR(l.total, l.l2 + l.codebook + 0.25 * l.commitment, 1e-5 * (1 + l.total));
    losses.push_back(l.total);
  }
  // Window-20 means must trend down: later windows below the first, the last
  // the lowest seen within a small slack.
  std::vector<double> windows;
  for (int s = 0; s + 20 <= 200; s += 20) windows.push_back(std::accumulate(losses.begin() + s, losses.begin() + s + 20, 0.0) / 20);
  for (size_t i = 1; i < windows.size(); ++i) EXPECT_LT(windows[i], windows[0]) << "window " << i;
  EXPECT_LT(windows.back(), 0.5 * windows.front());
}

TEST(Tokenizer, PerfectReconstructionHasZeroL2) {
  MediaClip a = constant_clip(1, 16, 16, 0.25f);
  EXPECT_EQ(psnr(a, a), kPsnrCap);
}

TEST(Metrics, PsnrExamples) {
  MediaClip a = constant_clip(1, 16, 16, 0.0f), b = constant_clip(1, 16, 16, 1.0f);
  EXPECT_DOUBLE_EQ(psnr(a, a), 99.0);
  EXPECT_NEAR(psnr(a, b), 0.0, 1e-12);
  MediaClip c = constant_clip(1, 16, 16, 0.5f), d = constant_clip(1, 16, 16, 0.6f);
  EXPECT_NEAR(psnr(c, d), 20.0, 1e-4);
  EXPECT_THROW(psnr(a, constant_clip(1, 16, 8, 0.0f)), std::invalid_argument);
}

TEST(Metrics, SsimExamples) {
  auto a = two_pattern_set(1, 1, 24, 24, MediaKind::image, 1)[0];
  EXPECT_NEAR(ssim(a, a), 1.0, 1e-6);

  MediaClip chk = constant_clip(1, 16, 16, 0.0f), inv = chk;
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < 16; ++y)
      for (int x = 0; x < 16; ++x) {
        const float v = (x + y) % 2 ? 1.0f : 0.0f;
        chk.pixels[(c * 16 + y) * 16 + x] = v;
        inv.pixels[(c * 16 + y) * 16 + x] = 1.0f - v;
      }
  EXPECT_LT(ssim(chk, inv), 0.0);

  // Zero variances: only the luminance term remains.
  const double x = 0.2, y = 0.7, c1 = 1e-4;
  EXPECT_NEAR(ssim(constant_clip(1, 12, 12, 0.2f), constant_clip(1, 12, 12, 0.7f)), (2 * x * y + c1) / (x * x + y * y + c1), 1e-6);
  EXPECT_THROW(ssim(constant_clip(1, 10, 12, 0.f), constant_clip(1, 10, 12, 0.f)), std::invalid_argument);
}

TEST(MediaIo, RtfRoundTripIsExact) {
  auto clip = two_pattern_set(1, 2, 8, 12, MediaKind::video, 7)[0];
  auto p = temp_file("clip.rtf");
  write_rtf(p, clip);
  auto back = read_rtf(p);
  EXPECT_EQ(back.pixels, clip.pixels);
  EXPECT_EQ(back.t, 2);
  EXPECT_EQ(back.fps, clip.fps);
  EXPECT_EQ(back.kind, MediaKind::video);
}

TEST(MediaIo, VgfRoundTripIsExact) {
  VisionGrid g;
  g.t = 2, g.h = 3, g.w = 4, g.codebook_size = 64, g.ct = 2, g.cs = 4, g.fps = 8, g.kind = MediaKind::video;
  for (int i = 0; i < 24; ++i) g.indices.push_back(i * 2);
  auto p = temp_file("grid.vgf");
  write_vgf(p, g);
  EXPECT_EQ(read_vgf(p), g);
}

TEST(MediaIo, TruncatedAndMalformedFilesRejected) {
  auto p = temp_file("bad.rtf");
  {
    std::ofstream f(p, std::ios::binary);
    f << "RTF1 1 3 2 2 1\n";
    f.write("\0\0\0\0", 4);
  }
  EXPECT_THROW(read_rtf(p), FormatError);
  {
    std::ofstream f(p, std::ios::binary);
    f << "XXXX 1 3 2 2 1\n";
  }
  try {
    read_rtf(p);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_EQ(e.offset(), 0u);
  }
  auto q = temp_file("bad.vgf");
  {
    std::ofstream f(q, std::ios::binary);
    f << "VGF1 1 1 1 4 1 2 1\n";
    const uint32_t v = 9;
    f.write(reinterpret_cast<const char*>(&v), 4);
  }
  EXPECT_THROW(read_vgf(q), std::exception);
}
