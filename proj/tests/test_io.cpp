#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "mmt/io/checkpoint.hpp"
#include "mmt/vq/synthetic.hpp"
#include "mmt/vq/tokenizer_io.hpp"
#include "test_util.hpp"

using namespace mmt;

namespace {

std::filesystem::path temp_path(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "mmt_test_io";
  std::filesystem::create_directories(dir);
  return dir / name;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

void spit(const std::filesystem::path& p, const std::string& s) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out << s;
}

io::Checkpoint sample_checkpoint() {
  Rng rng(1);
  io::Checkpoint ck;
  ck.header = {{"kind", "test"}, {"nested", {{"a", 1}, {"b", "x"}}}};
  ck.put_tensor("w", mmt::testing::random_tensor({3, 4}, rng));
  ck.put_tensor("scalar", Tensor::scalar(-0.0f));
  ck.put_tensor("empty", Tensor::zeros({0, 5}));
  ck.put_i64("counts", {1, -2, 1LL << 40});
  ck.put_bytes("blob", std::string("a\0b\n", 4));
  return ck;
}

}  // namespace

TEST(Checkpoint, RoundTripIsBitExact) {
  auto ck = sample_checkpoint();
  auto p = temp_path("a.ckpt");
  io::save_checkpoint(p, ck);
  auto back = io::load_checkpoint(p);
  EXPECT_TRUE(back == ck);
  auto p2 = temp_path("b.ckpt");
  io::save_checkpoint(p2, back);
  EXPECT_EQ(slurp(p), slurp(p2));
  EXPECT_EQ(slurp(p).rfind("CKPT1 {", 0), 0u);
}

TEST(Checkpoint, NanAndSignedZeroSurvive) {
  io::Checkpoint ck;
  ck.put_tensor("x", Tensor::from({3}, {-0.0f, std::numeric_limits<Real>::quiet_NaN(), 1e-38f}));
  auto p = temp_path("nan.ckpt");
  io::save_checkpoint(p, ck);
  EXPECT_TRUE(io::load_checkpoint(p) == ck);
}

TEST(Checkpoint, CorruptionReportsOffset) {
  auto p = temp_path("c.ckpt");
  io::save_checkpoint(p, sample_checkpoint());
  const std::string good = slurp(p);

  spit(p, "CKPT2" + good.substr(5));
  try {
    io::load_checkpoint(p);
    FAIL();
  } catch (const io::FormatError& e) {
    EXPECT_EQ(e.offset(), 0u);
  }

  spit(p, good.substr(0, good.size() - 3));
  EXPECT_THROW(io::load_checkpoint(p), io::FormatError);

  spit(p, good + "x");
  try {
    io::load_checkpoint(p);
    FAIL();
  } catch (const io::FormatError& e) {
    EXPECT_EQ(e.offset(), good.size());
  }

  spit(p, "CKPT1 {not json\n");
  EXPECT_THROW(io::load_checkpoint(p), io::FormatError);
}

TEST(Checkpoint, ShapeMismatchAndMissingEntryRejected) {
  auto ck = sample_checkpoint();
  EXPECT_THROW(ck.get_reals("w", {4, 3}), std::invalid_argument);
  EXPECT_THROW(ck.get_tensor("nope"), std::out_of_range);
  EXPECT_THROW(ck.get_i64("w"), std::invalid_argument);
}

TEST(Checkpoint, OptimizerAndRngRoundTrip) {
  Rng rng(3);
  NamedParams params{{"a", mmt::testing::random_tensor({2, 3}, rng)}, {"b", mmt::testing::random_tensor({3}, rng)}};
  AdamW opt;
  for (int s = 0; s < 3; ++s) {
    for (auto& [n, t] : params) {
      auto g = t.grad_buffer();
      for (auto& v : g) v = static_cast<Real>(rng.normal());
    }
    opt.step(params, 1e-2);
  }
  io::Checkpoint ck;
  io::put_params(ck, params);
  io::put_optimizer(ck, opt);
  io::put_rng(ck, "rng", rng);
  auto p = temp_path("opt.ckpt");
  io::save_checkpoint(p, ck);
  auto back = io::load_checkpoint(p);

  Rng rng2(0);
  NamedParams params2{{"a", Tensor::zeros({2, 3}, true)}, {"b", Tensor::zeros({3}, true)}};
  AdamW opt2;
  io::load_params(back, params2);
  io::load_optimizer(back, opt2, params2);
  io::load_rng(back, "rng", rng2);
  EXPECT_EQ(opt2.steps(), 3);
  EXPECT_EQ(rng2.next_u64(), rng.next_u64());
  for (size_t i = 0; i < params.size(); ++i) {
    EXPECT_EQ(params[i].second.values(), params2[i].second.values());
    EXPECT_EQ(opt.moments().at(params[i].first).m, opt2.moments().at(params[i].first).m);
    EXPECT_EQ(opt.moments().at(params[i].first).v, opt2.moments().at(params[i].first).v);
  }
}

TEST(TokenizerCheckpoint, ResumeMatchesUninterruptedRun) {
  vq::TokenizerConfig cfg;
  cfg.base_channels = 4;
  cfg.dead_code_steps = 2;  // exercise re-seeding through the resume
  auto batch = vq::two_pattern_set(2, 2, 16, 16, vq::MediaKind::video, 5);

  vq::VqTokenizer straight(cfg, 11);
  AdamW opt_a;
  for (int s = 0; s < 6; ++s) straight.train_step(batch, opt_a, 1e-3);

  vq::VqTokenizer first(cfg, 11);
  AdamW opt_b;
  for (int s = 0; s < 3; ++s) first.train_step(batch, opt_b, 1e-3);
  auto p = temp_path("tok.ckpt");
  vq::save_tokenizer(p, first, &opt_b);
  AdamW opt_c;
  auto resumed = vq::load_tokenizer(p, &opt_c);
  for (int s = 0; s < 3; ++s) resumed.train_step(batch, opt_c, 1e-3);

  const auto pa = straight.parameters(), pc = resumed.parameters();
  ASSERT_EQ(pa.size(), pc.size());
  for (size_t i = 0; i < pa.size(); ++i) EXPECT_EQ(pa[i].second.values(), pc[i].second.values()) << pa[i].first;
  EXPECT_EQ(straight.usage(), resumed.usage());
  EXPECT_EQ(straight.idle_steps(), resumed.idle_steps());
}

TEST(TokenizerCheckpoint, ConfigJsonRejectsUnknownKeys) {
  auto j = vq::config_to_json(vq::TokenizerConfig::large());
  EXPECT_EQ(vq::tokenizer_config_from_json(j), vq::TokenizerConfig::large());
  j["bogus"] = 1;
  EXPECT_THROW(vq::tokenizer_config_from_json(j), std::invalid_argument);
}
