#include "mmt/train/training.hpp"

#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <stdexcept>

#include "mmt/ops.hpp"

namespace mmt::train {

const char* stage_name(Stage s) {
  switch (s) {
    case Stage::pretrain1:
      return "pretrain1";
    case Stage::pretrain2:
      return "pretrain2";
    case Stage::qft:
      return "qft";
    case Stage::dpo:
      return "dpo";
  }
  return "?";
}

Stage parse_stage(const std::string& s) {
  for (Stage st : {Stage::pretrain1, Stage::pretrain2, Stage::qft, Stage::dpo})
    if (s == stage_name(st)) return st;
  throw std::invalid_argument("unknown stage '" + s + "'");
}

void TrainConfig::validate() const {
  if (context1 < 1 || context2 < 1) throw std::invalid_argument("train config: contexts must be positive");
  if (context1 >= context2) throw std::invalid_argument("train config: stage-1 context must be shorter than stage-2 context");
  if (!(base_lr >= 0)) throw std::invalid_argument("train config: base_lr must be nonnegative");
  if (total_steps < 1) throw std::invalid_argument("train config: total_steps must be positive");
  if (stage1_steps < 0 || stage1_steps > total_steps) throw std::invalid_argument("train config: stage1_steps must lie in [0, total_steps]");
  if (batch_rows < 1) throw std::invalid_argument("train config: batch_rows must be positive");
  if (!(dpo_beta > 0)) throw std::invalid_argument("train config: dpo_beta must be positive");
  if (!(dpo_lambda >= 0)) throw std::invalid_argument("train config: dpo_lambda must be nonnegative");
  if (checkpoint_every < 1 || keep_checkpoints < 1) throw std::invalid_argument("train config: checkpoint cadence must be positive");
}

nlohmann::json config_to_json(const TrainConfig& c) {
  return {{"stage", stage_name(c.stage)},       {"context1", c.context1},     {"context2", c.context2},
          {"base_lr", c.base_lr},               {"total_steps", c.total_steps}, {"stage1_steps", c.stage1_steps}, {"batch_rows", c.batch_rows},
          {"dpo_beta", c.dpo_beta},             {"dpo_lambda", c.dpo_lambda}, {"checkpoint_every", c.checkpoint_every},
          {"keep_checkpoints", c.keep_checkpoints}};
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw std::invalid_argument("train config must be a JSON object");
  static const std::set<std::string> known{"stage",    "context1",   "context2",         "base_lr",         "total_steps",
                                           "stage1_steps", "batch_rows", "dpo_beta", "dpo_lambda", "checkpoint_every", "keep_checkpoints"};
  for (const auto& [k, v] : j.items())
    if (!known.count(k)) throw std::invalid_argument("unknown train config key '" + k + "'");
  TrainConfig c;
  c.stage = parse_stage(j.value("stage", std::string(stage_name(c.stage))));
  c.context1 = j.value("context1", c.context1);
  c.context2 = j.value("context2", c.context2);
  c.base_lr = j.value("base_lr", c.base_lr);
  c.total_steps = j.value("total_steps", c.total_steps);
  c.stage1_steps = j.value("stage1_steps", c.stage1_steps);
  c.batch_rows = j.value("batch_rows", c.batch_rows);
  c.dpo_beta = j.value("dpo_beta", c.dpo_beta);
  c.dpo_lambda = j.value("dpo_lambda", c.dpo_lambda);
  c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
  c.keep_checkpoints = j.value("keep_checkpoints", c.keep_checkpoints);
  c.validate();
  return c;
}

Tensor weighted_ce(const Tensor& logits, std::span<const int32_t> targets, std::span<const float> weights) {
  if (logits.ndim() != 2) throw std::invalid_argument("weighted_ce: logits must be [N, V]");
  const auto N = static_cast<size_t>(logits.dim(0));
  if (targets.size() != N || weights.size() != N)
    throw std::invalid_argument("weighted_ce: " + std::to_string(N) + " logit rows, " + std::to_string(targets.size()) + " targets, " +
                                std::to_string(weights.size()) + " weights");
  double total = 0;
  for (float w : weights) {
    if (!(w >= 0.0f && w <= 1.0f)) throw std::invalid_argument("weighted_ce: weights must lie in [0, 1]");
    total += w;
  }
  if (total == 0) return Tensor::scalar(0.0f);
  std::vector<Real> w(weights.begin(), weights.end());
  Tensor lp = ops::gather_logprob(logits, targets);
  return ops::scale(ops::sum(ops::mul(lp, Tensor::from({static_cast<int64_t>(N)}, std::move(w)))), static_cast<Real>(-1.0 / total));
}

LmBatch make_batch(const codec::PackedBatch& data, std::span<const size_t> row_indices,
                   const std::vector<std::vector<float>>& token_weights) {
  if (row_indices.empty()) throw std::invalid_argument("make_batch: no rows");
  if (token_weights.size() != row_indices.size()) throw std::invalid_argument("make_batch: weight rows mismatch");
  LmBatch b;
  b.rows = static_cast<int64_t>(row_indices.size());
  b.length = data.context_length;
  for (size_t k = 0; k < row_indices.size(); ++k) {
    if (row_indices[k] >= data.rows.size()) throw std::out_of_range("make_batch: row index out of range");
    const auto& row = data.rows[row_indices[k]];
    const auto& tw = token_weights[k];
    if (tw.size() != row.tokens.size()) throw std::invalid_argument("make_batch: weight length mismatch");
    const auto ks = codec::key_starts(row);
    for (const auto& d : row.docs) b.non_pad += d.length;
    for (int64_t i = 0; i < b.length; ++i) {
      b.ids.push_back(row.tokens[i]);
      b.key_starts.push_back(ks[i]);
      const bool has_next = i + 1 < b.length && ks[i + 1] == ks[i] && ks[i + 1] != i + 1;
      b.targets.push_back(has_next ? row.tokens[i + 1] : 0);
      b.target_weights.push_back(has_next ? tw[i + 1] : 0.0f);
    }
  }
  return b;
}

LmBatch make_batch(const codec::PackedBatch& data, std::span<const size_t> row_indices) {
  std::vector<std::vector<float>> w;
  for (size_t r : row_indices) {
    if (r >= data.rows.size()) throw std::out_of_range("make_batch: row index out of range");
    w.push_back(data.rows[r].weights);
  }
  return make_batch(data, row_indices, w);
}

Tensor batch_loss(const model::Transformer& m, const LmBatch& b, bool train, Rng* rng) {
  Tensor logits = m.forward(b.ids, b.rows, b.length, b.key_starts, train, rng);
  return weighted_ce(ops::reshape(logits, {b.rows * b.length, m.config().vocab}), b.targets, b.target_weights);
}

StepMetrics lm_step(model::Transformer& m, AdamW& opt, const LmBatch& b, double lr, Rng& rng) {
  zero_grads(m.parameters());
  Graph g;
  Tensor loss;
  {
    GraphScope scope(g);
    loss = batch_loss(m, b, true, &rng);
  }
  const double value = loss.item();
  if (!std::isfinite(value)) throw std::runtime_error("training step: non-finite loss; step aborted");
  if (g.size() > 0) {
    backward(g, loss, m.parameters());
    opt.step(m.parameters(), lr);
  }
  return {value, lr, b.tokens()};
}

std::vector<float> qft_weights(const codec::Document& doc, const codec::VocabLayout& layout) {
  if (doc.mode != codec::Mode::generation) throw std::invalid_argument("qft_weights: understanding-mode documents are not supervised in QFT");
  std::vector<float> w(doc.tokens.size(), 0.0f);
  for (size_t i = 1; i < doc.tokens.size(); ++i)
    if (layout.in_vision_stream(doc.tokens[i])) w[i] = 1.0f;
  return w;
}

std::vector<float> qft_row_weights(const codec::PackedRow& row, const codec::VocabLayout& layout) {
  std::vector<float> w(row.tokens.size(), 0.0f);
  for (const auto& d : row.docs) {
    if (d.mode != codec::Mode::generation)
      throw std::invalid_argument("qft: document " + std::to_string(d.doc) + " is understanding-mode data");
    for (int32_t i = d.offset + 1; i < d.offset + d.length; ++i)
      if (layout.in_vision_stream(row.tokens[i])) w[i] = 1.0f;
  }
  return w;
}

Tensor sequence_logprob_tensor(const model::Transformer& m, std::span<const int32_t> prompt, std::span<const int32_t> response) {
  if (response.empty()) return Tensor::scalar(0.0f);
  if (prompt.empty()) throw std::invalid_argument("sequence_logprob: prompt must contain at least BOS");
  std::vector<int32_t> seq(prompt.begin(), prompt.end());
  seq.insert(seq.end(), response.begin(), response.end() - 1);
  const auto n = static_cast<int64_t>(seq.size());
  if (n > m.config().max_context)
    throw std::length_error("sequence_logprob: " + std::to_string(n) + " tokens exceed context " + std::to_string(m.config().max_context));
  Tensor logits = ops::reshape(m.forward(seq, 1, n, {}, false, nullptr), {n, m.config().vocab});
  Tensor span = ops::slice(logits, 0, static_cast<int64_t>(prompt.size()) - 1, static_cast<int64_t>(response.size()));
  return ops::sum(ops::gather_logprob(span, response));
}

double sequence_logprob(const model::Transformer& m, std::span<const int32_t> prompt, std::span<const int32_t> response) {
  if (response.empty()) return 0.0;
  if (prompt.empty()) throw std::invalid_argument("sequence_logprob: prompt must contain at least BOS");
  std::vector<int32_t> seq(prompt.begin(), prompt.end());
  seq.insert(seq.end(), response.begin(), response.end() - 1);
  const auto n = static_cast<int64_t>(seq.size());
  if (n > m.config().max_context)
    throw std::length_error("sequence_logprob: " + std::to_string(n) + " tokens exceed context " + std::to_string(m.config().max_context));
  Tensor logits = ops::reshape(m.forward(seq, 1, n, {}, false, nullptr), {n, m.config().vocab});
  const int64_t V = m.config().vocab, start = static_cast<int64_t>(prompt.size()) - 1;
  double total = 0;
  const auto lv = logits.data();
  for (size_t t = 0; t < response.size(); ++t) {
    const Real* row = lv.data() + (start + static_cast<int64_t>(t)) * V;
    double mx = row[0];
    for (int64_t v = 1; v < V; ++v) mx = std::max(mx, double(row[v]));
    double z = 0;
    for (int64_t v = 0; v < V; ++v) z += std::exp(double(row[v]) - mx);
    total += double(row[response[t]]) - mx - std::log(z);
  }
  return total;
}

double dpo_loss(double pw, double pl, double rw, double rl, double beta) {
  const double z = beta * ((pw - rw) - (pl - rl));
  // -log sigmoid(z) = log(1 + exp(-z)), evaluated stably.
  return z >= 0 ? std::log1p(std::exp(-z)) : -z + std::log1p(std::exp(z));
}

void validate_triplet(const PreferenceTriplet& t, const codec::VocabLayout& layout) {
  if (t.prompt.empty()) throw std::invalid_argument("triplet: empty prompt");
  if (t.chosen.empty()) throw std::invalid_argument("triplet: empty response");
  if (t.chosen.size() != t.rejected.size()) throw std::invalid_argument("triplet: chosen and rejected differ in length");
  auto check = [&](const std::vector<int32_t>& ids, const char* what) {
    for (int32_t id : ids)
      if (id < 0 || id >= layout.total()) throw std::out_of_range(std::string("triplet: ") + what + " id " + std::to_string(id) + " outside vocabulary");
  };
  check(t.prompt, "prompt");
  check(t.chosen, "chosen");
  check(t.rejected, "rejected");
  for (size_t i = 0; i < t.chosen.size(); ++i) {
    const bool a = t.chosen[i] >= layout.vision_base(), b = t.rejected[i] >= layout.vision_base();
    if (a != b || (!a && t.chosen[i] != t.rejected[i])) throw std::invalid_argument("triplet: skeletons differ at " + std::to_string(i));
  }
  codec::parse_vision_stream(t.chosen, layout);
}

namespace {

struct DpoTerms {
  Tensor total, dpo, ce;
  double margin = 0;
};

DpoTerms dpo_terms(const model::Transformer& policy, const std::vector<std::pair<double, double>>& ref,
                   std::span<const PreferenceTriplet> batch, double beta, double lambda) {
  if (batch.empty()) throw std::invalid_argument("dpo: empty batch");
  DpoTerms out;
  Tensor dpo_sum, ce_sum;
  for (size_t i = 0; i < batch.size(); ++i) {
    const auto& t = batch[i];
    const auto [rw, rl] = ref[i];
    Tensor pw = sequence_logprob_tensor(policy, t.prompt, t.chosen);
    Tensor pl = sequence_logprob_tensor(policy, t.prompt, t.rejected);
    Tensor z = ops::add_scalar(ops::scale(ops::sub(pw, pl), static_cast<Real>(beta)), static_cast<Real>(-beta * (rw - rl)));
    out.margin += z.item();
    Tensor d = ops::scale(ops::log_sigmoid(z), -1.0f);
    Tensor ce = ops::scale(pw, static_cast<Real>(-1.0 / static_cast<double>(t.chosen.size())));
    dpo_sum = dpo_sum.defined() ? ops::add(dpo_sum, d) : d;
    ce_sum = ce_sum.defined() ? ops::add(ce_sum, ce) : ce;
  }
  const Real inv = static_cast<Real>(1.0 / static_cast<double>(batch.size()));
  out.dpo = ops::scale(dpo_sum, inv);
  out.ce = ops::scale(ce_sum, inv);
  out.total = lambda == 0 ? out.dpo : ops::add(out.dpo, ops::scale(out.ce, static_cast<Real>(lambda)));
  out.margin /= static_cast<double>(batch.size());
  return out;
}

}  // namespace

std::vector<std::pair<double, double>> reference_logprobs(const model::Transformer& reference,
                                                          std::span<const PreferenceTriplet> batch) {
  if (batch.empty()) throw std::invalid_argument("dpo: empty batch");
  std::vector<std::pair<double, double>> out;
  for (const auto& t : batch)
    out.emplace_back(sequence_logprob(reference, t.prompt, t.chosen), sequence_logprob(reference, t.prompt, t.rejected));
  return out;
}

Tensor dpo_objective(const model::Transformer& policy, const std::vector<std::pair<double, double>>& ref,
                     std::span<const PreferenceTriplet> batch, double beta, double lambda) {
  if (ref.size() != batch.size()) throw std::invalid_argument("dpo: reference log-prob count mismatch");
  return dpo_terms(policy, ref, batch, beta, lambda).total;
}

DpoMetrics dpo_evaluate(const model::Transformer& policy, const model::Transformer& reference,
                        std::span<const PreferenceTriplet> batch, double beta, double lambda) {
  auto t = dpo_terms(policy, reference_logprobs(reference, batch), batch, beta, lambda);
  return {t.dpo.item(), t.ce.item(), t.total.item(), t.margin, 0.0};
}

DpoMetrics dpo_step(model::Transformer& policy, const model::Transformer& reference, std::span<const PreferenceTriplet> batch,
                    AdamW& opt, double beta, double lambda, double lr) {
  for (const auto& [name, p] : reference.parameters())
    if (p.has_grad()) throw std::logic_error("dpo: reference parameter '" + name + "' carries a gradient");
  const auto ref = reference_logprobs(reference, batch);
  zero_grads(policy.parameters());
  Graph g;
  DpoTerms t;
  {
    GraphScope scope(g);
    t = dpo_terms(policy, ref, batch, beta, lambda);
  }
  DpoMetrics m{t.dpo.item(), t.ce.item(), t.total.item(), t.margin, lr};
  if (!std::isfinite(m.total)) throw std::runtime_error("dpo step: non-finite loss; step aborted");
  backward(g, t.total, policy.parameters());
  for (const auto& [name, p] : reference.parameters())
    if (p.has_grad()) throw std::logic_error("dpo: reference parameter '" + name + "' received a gradient");
  opt.step(policy.parameters(), lr);
  return m;
}

std::vector<size_t> rows_for_step(int64_t step, int batch_rows, size_t row_count, uint64_t seed) {
  if (row_count == 0) throw std::invalid_argument("no training rows");
  std::vector<size_t> out;
  int64_t cached_epoch = -1;
  std::vector<size_t> perm(row_count);
  for (int j = 0; j < batch_rows; ++j) {
    const uint64_t g = static_cast<uint64_t>(step) * static_cast<uint64_t>(batch_rows) + static_cast<uint64_t>(j);
    const auto epoch = static_cast<int64_t>(g / row_count);
    if (epoch != cached_epoch) {
      std::iota(perm.begin(), perm.end(), size_t{0});
      Rng r(seed * 0x9E3779B97F4A7C15ull + static_cast<uint64_t>(epoch));
      for (size_t i = row_count; i > 1; --i) std::swap(perm[i - 1], perm[r.below(i)]);
      cached_epoch = epoch;
    }
    out.push_back(perm[g % row_count]);
  }
  return out;
}

double stage_lr(const TrainConfig& c, int64_t step) {
  switch (c.stage) {
    case Stage::qft:
      return cosine_linear_tail_lr(step, c.total_steps, c.base_lr);
    default:
      return cosine_lr(step, c.total_steps, c.base_lr);
  }
}

io::Checkpoint lm_checkpoint(const LmState& s, const nlohmann::json& extra) {
  io::Checkpoint ck;
  ck.header = {{"kind", "lm"},
               {"model", model::config_to_json(s.model.config())},
               {"step", s.step},
               {"stage", stage_name(s.stage)},
               {"data_seed", s.data_seed},
               {"extra", extra}};
  io::put_params(ck, s.model.parameters());
  io::put_optimizer(ck, s.opt);
  io::put_rng(ck, "rng.train", s.rng);
  return ck;
}

model::Transformer model_from_checkpoint(const io::Checkpoint& ck) {
  if (ck.header.value("kind", "") != "lm")
    throw std::invalid_argument("checkpoint is not a language-model checkpoint (kind '" + ck.header.value("kind", "") + "')");
  model::Transformer m(model::model_config_from_json(ck.header.at("model")));
  io::load_params(ck, m.parameters());
  return m;
}

LmState lm_state_from_checkpoint(const io::Checkpoint& ck) {
  LmState s{model_from_checkpoint(ck), AdamW{}, Rng{}, ck.header.at("step").get<int64_t>(),
            parse_stage(ck.header.at("stage").get<std::string>()), ck.header.at("data_seed").get<uint64_t>()};
  io::load_optimizer(ck, s.opt, s.model.parameters());
  io::load_rng(ck, "rng.train", s.rng);
  return s;
}

MetricsLog::MetricsLog(const std::filesystem::path& path) : path_(path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  if (!std::filesystem::exists(path)) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error(path.string() + ": cannot create metrics log");
    out << "step,stage,loss,lr,extra\n";
  }
}

void MetricsLog::write(int64_t step, const std::string& stage, double loss, double lr, const std::string& extra) {
  std::ofstream out(path_, std::ios::app);
  if (!out) throw std::runtime_error(path_.string() + ": cannot append metrics");
  char buf[64];
  out << step << ',' << stage << ',';
  std::snprintf(buf, sizeof buf, "%.9g,%.9g,", loss, lr);
  out << buf << extra << '\n';
}

void MetricsLog::truncate_from(int64_t step) {
  std::ifstream in(path_);
  std::string line, kept;
  bool header = true;
  while (std::getline(in, line)) {
    if (header || std::stoll(line.substr(0, line.find(','))) < step) kept += line + "\n";
    header = false;
  }
  in.close();
  std::ofstream out(path_, std::ios::trunc);
  out << kept;
}

}  // namespace mmt::train
