#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "mmt/io/checkpoint.hpp"
#include "mmt/ops.hpp"
#include "mmt/train/synthetic.hpp"
#include "mmt/train/training.hpp"
#include "test_util.hpp"

using namespace mmt;
using namespace mmt::train;

namespace {

const codec::VocabLayout kLayout = codec::layout_vocab(256, 64);

// Independent log-softmax in double.
double nll_oracle(std::span<const Real> row, int32_t target) {
  double mx = row[0];
  for (Real v : row) mx = std::max(mx, double(v));
  double z = 0;
  for (Real v : row) z += std::exp(double(v) - mx);
  return -(double(row[target]) - mx - std::log(z));
}

model::ModelConfig small_model(double dropout = 0.0) {
  model::ModelConfig c;
  c.max_context = 128;
  c.dropout = dropout;
  return c;
}

bool params_equal(const NamedParams& a, const NamedParams& b) {
  if (a.size() != b.size()) return false;
  for (size_t i = 0; i < a.size(); ++i) {
    if (a[i].first != b[i].first) return false;
    auto x = a[i].second.data(), y = b[i].second.data();
    if (!std::equal(x.begin(), x.end(), y.begin(), y.end())) return false;
  }
  return true;
}

std::filesystem::path temp_path(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "mmt_test_training";
  std::filesystem::create_directories(dir);
  return dir / name;
}

codec::Document text_document(const std::string& text) {
  codec::Document d;
  d.tokens.push_back(kLayout.bos());
  for (int32_t id : codec::encode_text(text)) d.tokens.push_back(id);
  d.tokens.push_back(kLayout.eos());
  d.weights.assign(d.tokens.size(), 1.0f);
  d.weights[0] = 0.0f;
  d.segments.assign(d.tokens.size(), codec::Segment::caption);
  return d;
}

}  // namespace

TEST(WeightedCe, TwoTokenHandExample) {
  Rng rng(1);
  Tensor logits = mmt::testing::random_tensor({2, 9}, rng, 2.0, false);
  std::vector<int32_t> targets{3, 7};
  const auto v = logits.data();
  const double a = nll_oracle(v.subspan(0, 9), 3), b = nll_oracle(v.subspan(9, 9), 7);
  std::vector<float> w{1.0f, 0.5f};
  EXPECT_NEAR(weighted_ce(logits, targets, w).item(), (a + 0.5 * b) / 1.5, 1e-5);
  std::vector<float> ones{1.0f, 1.0f};
  EXPECT_NEAR(weighted_ce(logits, targets, ones).item(), (a + b) / 2, 1e-5);
}

TEST(WeightedCe, ZeroWeightsAndRescaling) {
  Rng rng(2);
  Tensor logits = mmt::testing::random_tensor({5, 11}, rng, 1.5, false);
  std::vector<int32_t> t{0, 4, 10, 2, 6};
  std::vector<float> zero(5, 0.0f);
  EXPECT_EQ(weighted_ce(logits, t, zero).item(), 0.0);
  std::vector<float> w{0.2f, 0.5f, 1.0f, 0.0f, 0.3f}, w2;
  for (float x : w) w2.push_back(x * 0.5f);
  EXPECT_NEAR(weighted_ce(logits, t, w).item(), weighted_ce(logits, t, w2).item(), 1e-6);
}

TEST(WeightedCe, RejectsBadInputs) {
  Tensor logits = Tensor::zeros({2, 4});
  std::vector<int32_t> t{1, 2}, t1{1};
  std::vector<float> w{1.0f, 1.0f}, bad{1.5f, 1.0f};
  EXPECT_THROW(weighted_ce(logits, t1, w), std::invalid_argument);
  EXPECT_THROW(weighted_ce(logits, t, bad), std::invalid_argument);
}

TEST(MakeBatch, ShiftsTargetsAndStopsAtDocumentBoundaries) {
  std::vector<codec::Document> docs{text_document("abc"), text_document("hello")};
  auto packed = codec::pack(docs, 16, kLayout);
  ASSERT_EQ(packed.rows.size(), 1u);
  std::vector<size_t> rows{0};
  auto b = make_batch(packed, rows);
  EXPECT_EQ(b.tokens(), 12);
  const auto& row = packed.rows[0];
  for (const auto& d : row.docs) {
    for (int32_t i = d.offset; i < d.offset + d.length - 1; ++i) {
      EXPECT_EQ(b.targets[i], row.tokens[i + 1]);
      EXPECT_EQ(b.target_weights[i], row.weights[i + 1]);
    }
    EXPECT_EQ(b.target_weights[d.offset + d.length - 1], 0.0f);
  }
  for (int32_t i = 12; i < 16; ++i) EXPECT_EQ(b.target_weights[i], 0.0f);
}

TEST(Pretrain, PureTextLossIgnoresVisionWeighting) {
  std::vector<codec::Document> docs{text_document("the quick brown fox"), text_document("jumps")};
  auto packed = codec::pack(docs, 32, kLayout);
  std::vector<size_t> rows{0};
  // Same rows with the vision weight lifted to 1.
  std::vector<std::vector<float>> lifted;
  for (size_t r : rows) {
    auto w = packed.rows[r].weights;
    for (size_t i = 0; i < w.size(); ++i)
      if (w[i] > 0 && kLayout.in_vision_stream(packed.rows[r].tokens[i])) w[i] = 1.0f;
    lifted.push_back(w);
  }
  model::Transformer m(small_model(), 3);
  const double a = batch_loss(m, make_batch(packed, rows), false, nullptr).item();
  const double b = batch_loss(m, make_batch(packed, rows, lifted), false, nullptr).item();
  EXPECT_EQ(a, b);
}

TEST(Pretrain, StepReducesLossAndReportsTokens) {
  auto docs = overfit_documents(kLayout, 4, 3, 3);
  auto packed = codec::pack(docs, 64, kLayout);
  std::vector<size_t> rows{0};
  auto b = make_batch(packed, rows);
  model::Transformer m(small_model(0.1), 4);
  AdamW opt;
  Rng rng(5);
  const double before = batch_loss(m, b, false, nullptr).item();
  StepMetrics s{};
  for (int i = 0; i < 10; ++i) s = lm_step(m, opt, b, 1e-3, rng);
  EXPECT_EQ(s.tokens, packed.rows[0].docs.size() * docs[0].size());
  EXPECT_LT(batch_loss(m, b, false, nullptr).item(), before);
}

TEST(Qft, WeightsCoverExactlyTheVisionStream) {
  for (const auto& p : overfit_pairs(kLayout, 5, 3, 4)) {
    auto doc = codec::assemble_document(p.caption, p.grid, kLayout, codec::Mode::generation);
    auto w = qft_weights(doc, kLayout);
    const auto stream = codec::flatten_grid(p.grid, kLayout);
    std::vector<int32_t> weighted;
    for (size_t i = 0; i < w.size(); ++i) {
      EXPECT_TRUE(w[i] == 0.0f || w[i] == 1.0f);
      if (w[i] > 0) weighted.push_back(doc.tokens[i]);
      if (doc.segments[i] == codec::Segment::caption) {
        EXPECT_EQ(w[i], 0.0f);
      }
    }
    EXPECT_EQ(weighted, stream);
    auto bare = codec::assemble_document({}, p.grid, kLayout, codec::Mode::generation);
    auto wb = qft_weights(bare, kLayout);
    std::vector<int32_t> weighted_bare;
    for (size_t i = 0; i < wb.size(); ++i)
      if (wb[i] > 0) weighted_bare.push_back(bare.tokens[i]);
    EXPECT_EQ(weighted_bare, weighted);
  }
}

TEST(Qft, RejectsUnderstandingDocuments) {
  auto p = overfit_pairs(kLayout, 1, 2, 2)[0];
  auto doc = codec::assemble_document(p.caption, p.grid, kLayout, codec::Mode::understanding);
  EXPECT_THROW(qft_weights(doc, kLayout), std::invalid_argument);
  std::vector<codec::Document> docs{doc};
  auto packed = codec::pack(docs, 32, kLayout);
  EXPECT_THROW(qft_row_weights(packed.rows[0], kLayout), std::invalid_argument);
}

TEST(SequenceLogprob, EmptyNonPositiveAndIncrementalOracle) {
  model::Transformer m(small_model(), 6);
  Rng rng(7);
  std::vector<int32_t> prompt{kLayout.bos(), 'h', 'i', kLayout.sov()}, response;
  for (int i = 0; i < 20; ++i) response.push_back(static_cast<int32_t>(rng.below(328)));
  EXPECT_EQ(sequence_logprob(m, prompt, {}), 0.0);
  const double lp = sequence_logprob(m, prompt, response);
  EXPECT_LE(lp, 0.0);
  // One token at a time through the KV cache.
  auto cache = m.new_cache();
  std::vector<Real> logits;
  for (int32_t id : prompt) logits = m.step(cache, id);
  double inc = 0;
  for (int32_t id : response) {
    inc -= nll_oracle(logits, id);
    logits = m.step(cache, id);
  }
  EXPECT_NEAR(lp, inc, 1e-5 * std::max(1.0, std::abs(inc)));
  EXPECT_NEAR(sequence_logprob_tensor(m, prompt, response).item(), lp, 1e-3);
  std::vector<int32_t> long_response(200, kLayout.vision_id(0));
  EXPECT_THROW(sequence_logprob(m, prompt, long_response), std::length_error);
}

TEST(DpoLoss, ClosedForms) {
  EXPECT_NEAR(dpo_loss(-3, -4, -3, -4, 0.1), std::log(2.0), 1e-12);
  EXPECT_NEAR(dpo_loss(-7.5, -1.25, -7.5, -1.25, 2.0), std::log(2.0), 1e-12);
  // margins +1 on chosen, -1 on rejected -> z = 0.2
  EXPECT_NEAR(dpo_loss(0, -2, -1, -1, 0.1), -std::log(1.0 / (1.0 + std::exp(-0.2))), 1e-12);
  EXPECT_NEAR(dpo_loss(0, -2, -1, -1, 0.1), 0.5981, 1e-4);
  EXPECT_LT(dpo_loss(1e4, -1e4, 0, 0, 0.1), 1e-12);
  EXPECT_GT(dpo_loss(-1e4, 1e4, 0, 0, 0.1), 1e3);
  EXPECT_TRUE(std::isfinite(dpo_loss(-1e6, 1e6, 0, 0, 1.0)));
}

TEST(DpoLoss, MonotoneInPolicyLogprobs) {
  const double h = 1e-4;
  Rng rng(8);
  for (int i = 0; i < 50; ++i) {
    const double pw = -10 * rng.uniform(), pl = -10 * rng.uniform(), rw = -10 * rng.uniform(), rl = -10 * rng.uniform();
    const double dw = (dpo_loss(pw + h, pl, rw, rl, 0.1) - dpo_loss(pw - h, pl, rw, rl, 0.1)) / (2 * h);
    const double dl = (dpo_loss(pw, pl + h, rw, rl, 0.1) - dpo_loss(pw, pl - h, rw, rl, 0.1)) / (2 * h);
    EXPECT_LT(dw, 0.0);
    EXPECT_GT(dl, 0.0);
  }
}

TEST(Dpo, TripletsAreValid) {
  auto ts = synthetic_triplets(kLayout, 8, 3, 3, 9);
  ASSERT_EQ(ts.size(), 8u);
  for (const auto& t : ts) {
    EXPECT_NO_THROW(validate_triplet(t, kLayout));
    EXPECT_NE(t.chosen, t.rejected);
  }
  auto bad = ts[0];
  bad.rejected.pop_back();
  EXPECT_THROW(validate_triplet(bad, kLayout), std::invalid_argument);
  bad = ts[0];
  bad.rejected[0] = kLayout.eol();
  EXPECT_THROW(validate_triplet(bad, kLayout), std::invalid_argument);
  bad = ts[0];
  bad.prompt.push_back(5000);
  EXPECT_THROW(validate_triplet(bad, kLayout), std::out_of_range);
}

TEST(Dpo, StepZeroIsLogTwoAndReferenceStaysFrozen) {
  model::Transformer reference(small_model(), 10);
  model::Transformer policy = reference.clone();
  auto ts = synthetic_triplets(kLayout, 4, 3, 3, 11);
  AdamW opt;
  auto first = dpo_step(policy, reference, ts, opt, 0.1, 1.0, 1e-3);
  EXPECT_NEAR(first.dpo, std::log(2.0), 1e-5);
  EXPECT_NEAR(first.margin, 0.0, 1e-5);
  EXPECT_NEAR(first.total, first.dpo + first.ce, 1e-5);
  auto snapshot = reference.clone();
  for (int i = 0; i < 3; ++i) dpo_step(policy, reference, ts, opt, 0.1, 1.0, 1e-3);
  EXPECT_TRUE(params_equal(snapshot.parameters(), reference.parameters()));
  EXPECT_FALSE(params_equal(snapshot.parameters(), policy.parameters()));
  for (const auto& [name, p] : reference.parameters()) EXPECT_FALSE(p.has_grad()) << name;
}

TEST(Dpo, LambdaZeroTotalEqualsDpo) {
  model::Transformer reference(small_model(), 12);
  model::Transformer policy = reference.clone();
  auto ts = synthetic_triplets(kLayout, 3, 2, 3, 13);
  AdamW opt;
  for (int i = 0; i < 3; ++i) {
    auto m = dpo_step(policy, reference, ts, opt, 0.1, 0.0, 1e-3);
    EXPECT_EQ(m.total, m.dpo);
  }
}

TEST(Dpo, ReferenceWithGradientIsRejected) {
  model::Transformer reference(small_model(), 14);
  model::Transformer policy = reference.clone();
  auto ts = synthetic_triplets(kLayout, 2, 2, 2, 15);
  Graph g;
  Tensor loss;
  {
    GraphScope scope(g);
    loss = ops::scale(sequence_logprob_tensor(reference, ts[0].prompt, ts[0].chosen), -1.0f);
  }
  backward(g, loss, reference.parameters());
  AdamW opt;
  EXPECT_THROW(dpo_step(policy, reference, ts, opt, 0.1, 1.0, 1e-3), std::logic_error);
}

TEST(Dpo, TwoHundredStepsMovePreferenceTheRightWay) {
  model::Transformer reference(small_model(), 16);
  model::Transformer policy = reference.clone();
  auto ts = synthetic_triplets(kLayout, 8, 3, 3, 17);
  AdamW opt;
  TrainConfig cfg;
  cfg.stage = Stage::dpo;
  cfg.total_steps = 200;
  cfg.base_lr = 1e-3;
  for (int64_t s = 0; s < cfg.total_steps; ++s) dpo_step(policy, reference, ts, opt, cfg.dpo_beta, cfg.dpo_lambda, stage_lr(cfg, s));
  auto m = dpo_evaluate(policy, reference, ts, cfg.dpo_beta, cfg.dpo_lambda);
  EXPECT_GT(m.margin, 0.0);
  EXPECT_LT(m.dpo, std::log(2.0));
}

TEST(Schedule, RowsFormAPermutationPerEpoch) {
  const size_t n = 7;
  std::multiset<size_t> seen;
  for (int64_t s = 0; s < 7; ++s)
    for (size_t r : rows_for_step(s, 1, n, 42)) seen.insert(r);
  for (size_t r = 0; r < n; ++r) EXPECT_EQ(seen.count(r), 1u);
  EXPECT_EQ(rows_for_step(9, 2, n, 42), rows_for_step(9, 2, n, 42));
  std::set<size_t> batch;
  for (size_t r : rows_for_step(0, 7, n, 3)) batch.insert(r);
  EXPECT_EQ(batch.size(), n);
}

TEST(Schedule, StageLearningRates) {
  TrainConfig c;
  c.total_steps = 100;
  c.base_lr = 5e-5;
  EXPECT_DOUBLE_EQ(stage_lr(c, 0), 5e-5);
  EXPECT_LT(stage_lr(c, 50), 5e-5);
  c.stage = Stage::qft;
  EXPECT_NEAR(stage_lr(c, 100), 0.0, 1e-15);
  EXPECT_GT(stage_lr(c, 89), stage_lr(c, 95));
}

TEST(TrainConfig, JsonAndValidation) {
  TrainConfig c;
  c.stage = Stage::qft;
  c.dpo_lambda = 0.0;
  auto back = train_config_from_json(config_to_json(c));
  EXPECT_EQ(back.stage, Stage::qft);
  EXPECT_EQ(back.dpo_lambda, 0.0);
  auto j = config_to_json(c);
  j["warmup"] = 10;
  EXPECT_THROW(train_config_from_json(j), std::invalid_argument);
  c = {};
  c.context1 = 512;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = {};
  c.dpo_beta = 0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = {};
  c.dpo_lambda = -1;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  EXPECT_THROW(parse_stage("sft"), std::invalid_argument);
}

namespace {

void run_steps(LmState& s, const codec::PackedBatch& data, const TrainConfig& cfg, int64_t until) {
  for (; s.step < until; ++s.step) {
    const auto rows = rows_for_step(s.step, cfg.batch_rows, data.rows.size(), s.data_seed);
    lm_step(s.model, s.opt, make_batch(data, rows), stage_lr(cfg, s.step), s.rng);
  }
}

}  // namespace

TEST(Resume, CheckpointedRunMatchesUninterruptedRun) {
  auto data = codec::pack(overfit_documents(kLayout, 12, 2, 3), 64, kLayout);
  TrainConfig cfg;
  cfg.total_steps = 8;
  cfg.base_lr = 1e-3;
  LmState full{model::Transformer(small_model(0.1), 20), AdamW{}, Rng(21), 0, Stage::pretrain1, 22};
  run_steps(full, data, cfg, 8);

  LmState first{model::Transformer(small_model(0.1), 20), AdamW{}, Rng(21), 0, Stage::pretrain1, 22};
  run_steps(first, data, cfg, 3);
  const auto path = temp_path("resume.ckpt");
  io::save_checkpoint(path, lm_checkpoint(first));
  LmState resumed = lm_state_from_checkpoint(io::load_checkpoint(path));
  EXPECT_EQ(resumed.step, 3);
  EXPECT_TRUE(params_equal(resumed.model.parameters(), first.model.parameters()));
  run_steps(resumed, data, cfg, 8);
  EXPECT_TRUE(params_equal(resumed.model.parameters(), full.model.parameters()));
}

TEST(Resume, StageTransitionKeepsParameters) {
  LmState s{model::Transformer(small_model(), 23), AdamW{}, Rng(24), 5, Stage::pretrain1, 25};
  auto ck = lm_checkpoint(s);
  auto m = model_from_checkpoint(ck);
  EXPECT_TRUE(params_equal(m.parameters(), s.model.parameters()));
  ck.header["kind"] = "tokenizer";
  EXPECT_THROW(model_from_checkpoint(ck), std::invalid_argument);
}

TEST(MetricsLog, WritesHeaderOnceAndAppends) {
  const auto path = temp_path("metrics.csv");
  std::filesystem::remove(path);
  {
    MetricsLog log(path);
    log.write(1, "pretrain1", 2.5, 1e-4, "tokens=10");
  }
  MetricsLog again(path);
  again.write(2, "pretrain1", 2.25, 9e-5, "tokens=10");
  std::ifstream in(path);
  std::string line;
  std::vector<std::string> lines;
  while (std::getline(in, line)) lines.push_back(line);
  ASSERT_EQ(lines.size(), 3u);
  EXPECT_EQ(lines[0], "step,stage,loss,lr,extra");
  EXPECT_EQ(lines[1], "1,pretrain1,2.5,0.0001,tokens=10");
}
