#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "mmt/codec/codec.hpp"
#include "mmt/io/checkpoint.hpp"
#include "mmt/model/transformer.hpp"
#include "mmt/optim.hpp"
#include "mmt/rng.hpp"

namespace mmt::train {

enum class Stage { pretrain1, pretrain2, qft, dpo };
const char* stage_name(Stage s);
Stage parse_stage(const std::string& s);

struct TrainConfig {
  Stage stage = Stage::pretrain1;
  int context1 = 256;  // pretrain stage 1 rows
  int context2 = 512;  // pretrain stage 2 rows
  double base_lr = 5e-5;
  int64_t total_steps = 1000;  // pretraining: global end across both stages
  int64_t stage1_steps = 500;  // pretraining: where stage 1 hands over
  int batch_rows = 1;
  double dpo_beta = 0.1;
  double dpo_lambda = 1.0;
  int64_t checkpoint_every = 100;
  int keep_checkpoints = 3;

  int context_for(Stage s) const { return s == Stage::pretrain1 ? context1 : context2; }
  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

nlohmann::json config_to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const nlohmann::json& j);

// sum_i w_i * nll_i / sum_i w_i over logits [N, V]; zero total weight gives
// a constant 0.
Tensor weighted_ce(const Tensor& logits, std::span<const int32_t> targets, std::span<const float> weights);

// Rows of a packed dataset flattened for one forward pass. Position i of a
// row predicts token i + 1 with weight target_weights[i] (0 at the last
// position and wherever the next token opens a new document).
struct LmBatch {
  int64_t rows = 0, length = 0;
  std::vector<int32_t> ids, targets, key_starts;
  std::vector<float> target_weights;
  int64_t non_pad = 0;
  int64_t tokens() const { return non_pad; }
};

LmBatch make_batch(const codec::PackedBatch& data, std::span<const size_t> row_indices);
// Replaces the stored weights with supplied per-row token weights.
LmBatch make_batch(const codec::PackedBatch& data, std::span<const size_t> row_indices,
                   const std::vector<std::vector<float>>& token_weights);

Tensor batch_loss(const model::Transformer& m, const LmBatch& b, bool train, Rng* rng);

struct StepMetrics {
  double loss = 0, lr = 0;
  int64_t tokens = 0;
};

// One optimizer step of weighted next-token prediction. Throws before
// touching parameters when the loss is not finite.
StepMetrics lm_step(model::Transformer& m, AdamW& opt, const LmBatch& b, double lr, Rng& rng);

// Vision-stream targets (codes, EOL, EOF) weight 1, everything else 0.
std::vector<float> qft_weights(const codec::Document& doc, const codec::VocabLayout& layout);
// Same rule applied to every document of a packed row; understanding-mode
// documents are rejected.
std::vector<float> qft_row_weights(const codec::PackedRow& row, const codec::VocabLayout& layout);

// Sum of log p(response_t | prompt, response_<t) in eval mode.
double sequence_logprob(const model::Transformer& m, std::span<const int32_t> prompt, std::span<const int32_t> response);
// Differentiable form (eval mode, recorded on the active graph).
Tensor sequence_logprob_tensor(const model::Transformer& m, std::span<const int32_t> prompt, std::span<const int32_t> response);

// -log sigmoid(beta * ((pw - rw) - (pl - rl)))
double dpo_loss(double policy_chosen, double policy_rejected, double ref_chosen, double ref_rejected, double beta);

struct PreferenceTriplet {
  std::vector<int32_t> prompt, chosen, rejected;
};

// Same length and identical structural skeleton for chosen and rejected;
// every id valid under the layout.
void validate_triplet(const PreferenceTriplet& t, const codec::VocabLayout& layout);

struct DpoMetrics {
  double dpo = 0, ce = 0, total = 0, margin = 0, lr = 0;
};

// total = mean dpo + lambda * mean CE on prompt + chosen with QFT weights.
// Gradients reach the policy only; a reference parameter that picks up a
// gradient raises std::logic_error.
DpoMetrics dpo_step(model::Transformer& policy, const model::Transformer& reference, std::span<const PreferenceTriplet> batch,
                    AdamW& opt, double beta, double lambda, double lr);
// (chosen, rejected) log-probs under the reference, evaluated eagerly.
std::vector<std::pair<double, double>> reference_logprobs(const model::Transformer& reference,
                                                          std::span<const PreferenceTriplet> batch);
// Differentiable total objective given fixed reference log-probs.
Tensor dpo_objective(const model::Transformer& policy, const std::vector<std::pair<double, double>>& ref,
                     std::span<const PreferenceTriplet> batch, double beta, double lambda);
// Same quantities without an update.
DpoMetrics dpo_evaluate(const model::Transformer& policy, const model::Transformer& reference,
                        std::span<const PreferenceTriplet> batch, double beta, double lambda);

// Deterministic row order: epoch e is a seeded permutation of all rows.
std::vector<size_t> rows_for_step(int64_t step, int batch_rows, size_t row_count, uint64_t seed);

// Learning rate for a global step. Pretraining runs one cosine over both
// stages; QFT uses cosine with a linear tail; DPO uses plain cosine.
double stage_lr(const TrainConfig& c, int64_t step);

// Model, optimizer and RNG bundled for bit-exact resume.
struct LmState {
  model::Transformer model;
  AdamW opt;
  Rng rng;
  int64_t step = 0;
  Stage stage = Stage::pretrain1;
  uint64_t data_seed = 0;
};

io::Checkpoint lm_checkpoint(const LmState& s, const nlohmann::json& extra = nlohmann::json::object());
LmState lm_state_from_checkpoint(const io::Checkpoint& ck);
// Model parameters only (e.g. a DPO reference).
model::Transformer model_from_checkpoint(const io::Checkpoint& ck);

// Appends "step,stage,loss,lr,extra" rows; extra is "key=value;..." text.
class MetricsLog {
 public:
  explicit MetricsLog(const std::filesystem::path& path);
  void write(int64_t step, const std::string& stage, double loss, double lr, const std::string& extra);
  // Drops rows whose step is >= step (used when resuming into the same run).
  void truncate_from(int64_t step);

 private:
  std::filesystem::path path_;
};

}  // namespace mmt::train
