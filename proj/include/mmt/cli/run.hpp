#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "mmt/model/transformer.hpp"
#include "mmt/sample/sampling.hpp"
#include "mmt/train/training.hpp"
#include "mmt/vq/tokenizer.hpp"

namespace mmt::cli {

struct TokenizerTraining {
  int64_t steps = 300;
  int batch = 4;
  double lr = 2e-3;
  int holdout_every = 0;  // every n-th manifest item is held out; 0 keeps all for training
  bool operator==(const TokenizerTraining&) const = default;
};

// Paths are resolved against the config file's directory.
struct DataPaths {
  std::string manifest;        // training manifest (caption, media, mode)
  std::string media_manifest;  // media-only manifest for the tokenizer
  std::string triplets;
  std::string dataset;
  std::string tokenizer;
  std::string model;      // checkpoint used by generate / extend / caption
  std::string init;       // starting weights for a training stage
  std::string reference;  // frozen DPO reference
  int context_length = 0; // build-corpus row length; 0 uses train.context2
  bool operator==(const DataPaths&) const = default;
};

struct GenerateSpec {
  std::string caption;
  std::string kind = "image";
  int t = 1, h = 4, w = 4, fps = 8;
  std::string input;  // grid (.vgf) or media (.rtf) for extend / caption
  int frames = 2;     // frames appended by extend
  int max_caption_tokens = 64;
  bool operator==(const GenerateSpec&) const = default;
};

struct RunConfig {
  uint64_t seed = 0;
  int text_size = 256;
  model::ModelConfig model;
  vq::TokenizerConfig tokenizer;
  train::TrainConfig train;
  sample::SampleParams sample;
  TokenizerTraining tokenizer_train;
  DataPaths data;
  GenerateSpec generate;

  codec::VocabLayout layout() const { return codec::layout_vocab(text_size, tokenizer.codebook_size); }
  bool operator==(const RunConfig&) const = default;
};

nlohmann::json to_json(const RunConfig& c);
// Unknown keys are rejected at every level; missing keys take defaults. The
// model vocabulary follows the layout unless given, and a default top_k is
// clamped to the codebook size.
RunConfig run_config_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
RunConfig load_run_config(const std::filesystem::path& path);
std::string config_hash(const RunConfig& c);

struct Overrides {
  std::optional<uint64_t> seed;
  std::string resume;
  std::string out = "run";
};

// Every command writes into out/: config.json, run.json, metrics.csv,
// checkpoints/, samples/ as applicable.
void cmd_train_tokenizer(const RunConfig& c, const Overrides& o);
void cmd_build_corpus(const RunConfig& c, const Overrides& o);
void cmd_pretrain(const RunConfig& c, const Overrides& o);
void cmd_qft(const RunConfig& c, const Overrides& o);
void cmd_dpo(const RunConfig& c, const Overrides& o);
void cmd_generate(const RunConfig& c, const Overrides& o);
void cmd_extend(const RunConfig& c, const Overrides& o);
void cmd_caption(const RunConfig& c, const Overrides& o);
void cmd_eval_recon(const RunConfig& c, const Overrides& o);

// Per-resolution reconstruction table (resolution, count, psnr, ssim).
struct ReconRow {
  std::string resolution;
  int count = 0;
  double psnr = 0, ssim = 0;
};
std::vector<ReconRow> recon_table(const std::vector<vq::MediaClip>& clips,
                                  const std::function<vq::MediaClip(const vq::MediaClip&)>& reconstruct);

// JSON-lines readers; errors name the file and line.
struct ManifestEntry {
  std::string caption;
  std::filesystem::path media;
  codec::Mode mode = codec::Mode::generation;
};
std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path);
std::vector<train::PreferenceTriplet> read_triplets(const std::filesystem::path& path);
void write_triplets(const std::filesystem::path& path, const std::vector<train::PreferenceTriplet>& ts);

}  // namespace mmt::cli
