#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>

#include "mmt/cli/run.hpp"
#include "mmt/io/checkpoint.hpp"
#include "mmt/log.hpp"
#include "mmt/vq/metrics.hpp"
#include "mmt/vq/synthetic.hpp"
#include "mmt/vq/tokenizer_io.hpp"

namespace mmt::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void write_json(const fs::path& path, const json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error(path.string() + ": cannot write");
  out << j.dump(2, ' ', false, json::error_handler_t::replace) << '\n';
}

void require(const std::string& path, const char* what) {
  if (path.empty()) throw std::invalid_argument(std::string("config: ") + what + " is required for this command");
}

// Creates the run directory and records the resolved config.
fs::path open_run(const RunConfig& c, const Overrides& o, const std::string& command) {
  const fs::path out(o.out);
  fs::create_directories(out);
  write_json(out / "config.json", to_json(c));
  write_json(out / "run.json", {{"command", command}, {"config_hash", config_hash(c)}, {"seed", c.seed}});
  return out;
}

void snapshot(const fs::path& out, const std::string& path) {
  if (path.empty()) return;
  fs::create_directories(out / "manifests");
  fs::copy_file(path, out / "manifests" / fs::path(path).filename(), fs::copy_options::overwrite_existing);
}

std::vector<int32_t> json_ids(const json& j, const fs::path& path, size_t line, const char* key) {
  if (!j.contains(key) || !j.at(key).is_array())
    throw std::invalid_argument(path.string() + ":" + std::to_string(line) + ": '" + key + "' must be an array of ids");
  std::vector<int32_t> ids;
  for (const auto& v : j.at(key)) {
    if (!v.is_number_integer()) throw std::invalid_argument(path.string() + ":" + std::to_string(line) + ": non-integer id in '" + key + "'");
    ids.push_back(v.get<int32_t>());
  }
  return ids;
}

template <class F>
void for_each_jsonl(const fs::path& path, F&& f) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error(path.string() + ": cannot open");
  std::string line;
  size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw std::invalid_argument(path.string() + ":" + std::to_string(n) + ": invalid JSON at column " + std::to_string(e.byte));
    }
    if (!j.is_object()) throw std::invalid_argument(path.string() + ":" + std::to_string(n) + ": record must be an object");
    f(j, n);
  }
}

// Keeps the newest `keep` step checkpoints.
void prune(const fs::path& dir, int keep) {
  std::vector<fs::path> steps;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.path().filename().string().rfind("step-", 0) == 0) steps.push_back(e.path());
  std::sort(steps.begin(), steps.end());
  for (size_t i = 0; i + static_cast<size_t>(keep) < steps.size(); ++i) fs::remove(steps[i]);
}

std::string step_name(int64_t step) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "step-%08lld.ckpt", static_cast<long long>(step));
  return buf;
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

void check_layout(const model::ModelConfig& m, const codec::VocabLayout& layout) {
  if (m.vocab != layout.total())
    throw std::invalid_argument("vocab mismatch: model total " + std::to_string(m.vocab) + " vs layout total " + std::to_string(layout.total()));
}

model::Transformer load_model(const std::string& path, const RunConfig& c) {
  auto m = train::model_from_checkpoint(io::load_checkpoint(path));
  check_layout(m.config(), c.layout());
  return m;
}

vq::VqTokenizer load_tok(const RunConfig& c) {
  auto tok = vq::load_tokenizer(c.data.tokenizer);
  if (tok.config().codebook_size != c.tokenizer.codebook_size)
    throw std::invalid_argument("vocab mismatch: tokenizer codebook " + std::to_string(tok.config().codebook_size) + " vs config codebook " +
                                std::to_string(c.tokenizer.codebook_size));
  return tok;
}

std::vector<vq::MediaClip> read_media(const std::vector<ManifestEntry>& entries) {
  std::vector<vq::MediaClip> clips;
  for (const auto& e : entries) clips.push_back(vq::read_rtf(e.media));
  return clips;
}

std::string resolution_key(const vq::MediaClip& c) {
  return c.kind == vq::MediaKind::video ? "video " + std::to_string(c.t) + "x" + std::to_string(c.h) + "x" + std::to_string(c.w)
                                        : "image " + std::to_string(c.h) + "x" + std::to_string(c.w);
}

double ssim_or_nan(const vq::MediaClip& a, const vq::MediaClip& b) {
  if (a.h < vq::kSsimWindow || a.w < vq::kSsimWindow) return std::nan("");
  return vq::ssim(a, b);
}

json sidecar(const RunConfig& c, const Overrides& o, const std::string& command) {
  json s{{"command", command}, {"params", sample::params_to_json(c.sample)}, {"seed", c.sample.seed}, {"config_hash", config_hash(c)}};
  json hashes = json::object();
  for (const auto& [k, p] : {std::pair{"model", c.data.model}, std::pair{"tokenizer", c.data.tokenizer}})
    if (!p.empty()) hashes[k] = io::file_fingerprint(p);
  s["checkpoints"] = hashes;
  return s;
}

// Grid input for extend / caption: a VGF file, or RTF media tokenized with
// the configured tokenizer.
vq::VisionGrid read_grid_input(const RunConfig& c) {
  require(c.generate.input, "generate.input");
  const fs::path p(c.generate.input);
  if (p.extension() == ".rtf") {
    require(c.data.tokenizer, "data.tokenizer (to tokenize .rtf input)");
    return load_tok(c).tokenize(vq::read_rtf(p));
  }
  return vq::read_vgf(p);
}

void write_outputs(const RunConfig& c, const fs::path& dir, const std::string& stem, const vq::VisionGrid& g, json meta) {
  fs::create_directories(dir);
  vq::write_vgf(dir / (stem + ".vgf"), g);
  if (!c.data.tokenizer.empty()) {
    vq::write_rtf(dir / (stem + ".rtf"), load_tok(c).detokenize(g));
    meta["media"] = stem + ".rtf";
  }
  meta["grid"] = stem + ".vgf";
  meta["dims"] = {{"t", g.t}, {"h", g.h}, {"w", g.w}, {"kind", vq::kind_name(g.kind)}};
  write_json(dir / (stem + ".json"), meta);
}

// Shared loop for pretraining and QFT. weights, when given, replaces the
// stored per-token weights row by row.
void run_lm(const RunConfig& c, const Overrides& o, train::Stage stage, int64_t begin, int64_t end, const codec::Dataset& ds,
            const std::vector<std::vector<float>>* weights, const std::string& command) {
  const fs::path out = open_run(c, o, command);
  check_layout(c.model, ds.layout);
  if (ds.batch.context_length > c.model.max_context)
    throw std::invalid_argument("stage/context mismatch: dataset rows of " + std::to_string(ds.batch.context_length) +
                                " exceed model context " + std::to_string(c.model.max_context));
  if (ds.batch.rows.empty()) throw std::invalid_argument("dataset has no rows");
  train::TrainConfig tc = c.train;
  tc.stage = stage;
  const fs::path ckdir = out / "checkpoints";
  fs::create_directories(ckdir);
  train::MetricsLog log(out / "metrics.csv");

  std::optional<train::LmState> state;
  double best = std::numeric_limits<double>::infinity();
  if (!o.resume.empty()) {
    const auto ck = io::load_checkpoint(o.resume);
    state.emplace(train::lm_state_from_checkpoint(ck));
    if (state->stage != stage)
      throw std::invalid_argument("resume checkpoint is stage " + std::string(train::stage_name(state->stage)) + ", expected " +
                                  train::stage_name(stage));
    if (!(state->model.config() == c.model)) throw std::invalid_argument("resume checkpoint model config differs from config");
    best = ck.header.value("extra", json::object()).value("best_loss", best);
    log.truncate_from(state->step);
  } else {
    model::Transformer m(c.model, c.seed);
    if (!c.data.init.empty()) {
      auto init = train::model_from_checkpoint(io::load_checkpoint(c.data.init));
      if (!(init.config() == c.model)) throw std::invalid_argument("init checkpoint model config differs from config");
      m.copy_from(init);
    }
    state.emplace(train::LmState{std::move(m), AdamW{}, Rng(c.seed + 1), begin, stage, c.seed});
  }
  auto& s = *state;
  const auto save = [&](double loss) {
    const bool is_best = loss < best;
    if (is_best) best = loss;
    const auto ck = train::lm_checkpoint(s, {{"config_hash", config_hash(c)}, {"best_loss", best}});
    io::save_checkpoint(ckdir / step_name(s.step), ck);
    if (is_best) io::save_checkpoint(ckdir / "best.ckpt", ck);
    prune(ckdir, c.train.keep_checkpoints);
  };
  double loss = std::numeric_limits<double>::infinity();
  for (; s.step < end; ) {
    const auto rows = train::rows_for_step(s.step, c.train.batch_rows, ds.batch.rows.size(), s.data_seed);
    train::LmBatch b;
    if (weights) {
      std::vector<std::vector<float>> w;
      for (size_t r : rows) w.push_back((*weights)[r]);
      b = train::make_batch(ds.batch, rows, w);
    } else {
      b = train::make_batch(ds.batch, rows);
    }
    const double lr = train::stage_lr(tc, s.step);
    const auto m = train::lm_step(s.model, s.opt, b, lr, s.rng);
    loss = m.loss;
    log.write(s.step, train::stage_name(stage), m.loss, lr, "tokens=" + std::to_string(m.tokens));
    ++s.step;
    if (s.step % c.train.checkpoint_every == 0 || s.step == end) save(loss);
  }
  io::save_checkpoint(out / "final.ckpt", train::lm_checkpoint(s, {{"config_hash", config_hash(c)}, {"best_loss", best}}));
  log_info(command + ": finished at step " + std::to_string(s.step));
}

}  // namespace

std::vector<ManifestEntry> read_manifest(const fs::path& path) {
  std::vector<ManifestEntry> out;
  const fs::path base = fs::absolute(path).parent_path();
  for_each_jsonl(path, [&](const json& j, size_t line) {
    for (const auto& [k, v] : j.items())
      if (k != "caption" && k != "media" && k != "mode")
        throw std::invalid_argument(path.string() + ":" + std::to_string(line) + ": unknown key '" + k + "'");
    if (!j.contains("media") || !j.at("media").is_string())
      throw std::invalid_argument(path.string() + ":" + std::to_string(line) + ": 'media' path is required");
    ManifestEntry e;
    e.caption = j.value("caption", std::string());
    fs::path media(j.at("media").get<std::string>());
    e.media = media.is_absolute() ? media : base / media;
    try {
      e.mode = codec::parse_mode(j.value("mode", std::string("generation")));
    } catch (const std::exception& ex) {
      throw std::invalid_argument(path.string() + ":" + std::to_string(line) + ": " + ex.what());
    }
    out.push_back(std::move(e));
  });
  return out;
}

std::vector<train::PreferenceTriplet> read_triplets(const fs::path& path) {
  std::vector<train::PreferenceTriplet> out;
  for_each_jsonl(path, [&](const json& j, size_t line) {
    for (const auto& [k, v] : j.items())
      if (k != "prompt" && k != "chosen" && k != "rejected")
        throw std::invalid_argument(path.string() + ":" + std::to_string(line) + ": unknown key '" + k + "'");
    out.push_back({json_ids(j, path, line, "prompt"), json_ids(j, path, line, "chosen"), json_ids(j, path, line, "rejected")});
  });
  return out;
}

void write_triplets(const fs::path& path, const std::vector<train::PreferenceTriplet>& ts) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error(path.string() + ": cannot write");
  for (const auto& t : ts) out << json{{"prompt", t.prompt}, {"chosen", t.chosen}, {"rejected", t.rejected}}.dump() << '\n';
}

std::vector<ReconRow> recon_table(const std::vector<vq::MediaClip>& clips,
                                  const std::function<vq::MediaClip(const vq::MediaClip&)>& reconstruct) {
  std::map<std::string, std::vector<size_t>> groups;
  for (size_t i = 0; i < clips.size(); ++i) groups[resolution_key(clips[i])].push_back(i);
  std::vector<ReconRow> rows;
  for (const auto& [key, idx] : groups) {
    ReconRow r;
    r.resolution = key;
    r.count = static_cast<int>(idx.size());
    for (size_t i : idx) {
      const auto rec = reconstruct(clips[i]);
      r.psnr += vq::psnr(clips[i], rec);
      r.ssim += ssim_or_nan(clips[i], rec);
    }
    r.psnr /= r.count;
    r.ssim /= r.count;
    rows.push_back(r);
  }
  return rows;
}

void cmd_train_tokenizer(const RunConfig& c, const Overrides& o) {
  require(c.data.media_manifest, "data.media_manifest");
  const fs::path out = open_run(c, o, "train-tokenizer");
  snapshot(out, c.data.media_manifest);
  const auto entries = read_manifest(c.data.media_manifest);
  const auto clips = read_media(entries);
  if (clips.empty()) throw std::invalid_argument(c.data.media_manifest + ": manifest lists no media");
  std::vector<vq::MediaClip> train_set, eval_set;
  const int every = c.tokenizer_train.holdout_every;
  for (size_t i = 0; i < clips.size(); ++i) {
    if (every > 0 && clips.size() > 1 && (i + 1) % static_cast<size_t>(every) == 0) eval_set.push_back(clips[i]);
    else train_set.push_back(clips[i]);
  }
  const bool held_out = !eval_set.empty();
  if (!held_out) eval_set = train_set;
  // Batches never mix shapes: step s uses shape group s mod G.
  std::map<std::string, std::vector<size_t>> by_shape;
  for (size_t i = 0; i < train_set.size(); ++i) by_shape[resolution_key(train_set[i])].push_back(i);
  std::vector<std::vector<size_t>> groups;
  for (auto& [k, v] : by_shape) groups.push_back(v);

  AdamW opt;
  int64_t step = 0;
  std::optional<vq::VqTokenizer> tok;
  train::MetricsLog log(out / "metrics.csv");
  if (!o.resume.empty()) {
    const auto ck = io::load_checkpoint(o.resume);
    tok.emplace(vq::tokenizer_from_checkpoint(ck, &opt));
    if (!(tok->config() == c.tokenizer)) throw std::invalid_argument("resume checkpoint tokenizer config differs from config");
    step = ck.header.value("step", int64_t{0});
    log.truncate_from(step);
  } else {
    tok.emplace(c.tokenizer, c.seed);
  }
  const fs::path ckdir = out / "checkpoints";
  fs::create_directories(ckdir);
  const int64_t total = c.tokenizer_train.steps;
  const auto save = [&](const fs::path& path) {
    auto ck = vq::tokenizer_checkpoint(*tok, &opt);
    ck.header["step"] = step;
    ck.header["config_hash"] = config_hash(c);
    io::save_checkpoint(path, ck);
  };
  for (; step < total;) {
    const auto& g = groups[static_cast<size_t>(step) % groups.size()];
    const int64_t round = step / static_cast<int64_t>(groups.size());
    const int batch = std::min<int>(c.tokenizer_train.batch, static_cast<int>(g.size()));
    std::vector<vq::MediaClip> b;
    for (size_t r : train::rows_for_step(round, batch, g.size(), c.seed + step % static_cast<int64_t>(groups.size())))
      b.push_back(train_set[g[r]]);
    const double lr = cosine_lr(step, total, c.tokenizer_train.lr);
    const auto l = tok->train_step(b, opt, lr);
    log.write(step, "tokenizer", l.total, lr, "l2=" + fmt(l.l2) + ";codebook=" + fmt(l.codebook) + ";commitment=" + fmt(l.commitment));
    ++step;
    if (step % c.train.checkpoint_every == 0 || step == total) {
      save(ckdir / step_name(step));
      prune(ckdir, c.train.keep_checkpoints);
    }
  }
  save(out / "tokenizer.ckpt");

  // Report: reconstruction against the mean-image baseline.
  double psnr = 0, ssim = 0, base = 0;
  int ssim_n = 0;
  for (const auto& clip : eval_set) {
    std::vector<vq::MediaClip> same;
    for (const auto& t : train_set)
      if (resolution_key(t) == resolution_key(clip)) same.push_back(t);
    const auto rec = tok->reconstruct(clip);
    psnr += vq::psnr(clip, rec);
    const double s = ssim_or_nan(clip, rec);
    if (!std::isnan(s)) {
      ssim += s;
      ++ssim_n;
    }
    base += same.empty() ? 0.0 : vq::psnr(clip, vq::mean_clip(same));
  }
  const double n = static_cast<double>(eval_set.size());
  json report{{"split", held_out ? "holdout" : "train"},
              {"items", eval_set.size()},
              {"psnr", psnr / n},
              {"baseline_psnr", base / n},
              {"ssim", ssim_n ? json(ssim / ssim_n) : json(nullptr)},
              {"steps", step},
              {"config_hash", config_hash(c)}};
  write_json(out / "report.json", report);
  log_info("train-tokenizer: psnr " + fmt(psnr / n) + " dB vs baseline " + fmt(base / n) + " dB");
}

void cmd_build_corpus(const RunConfig& c, const Overrides& o) {
  require(c.data.manifest, "data.manifest");
  require(c.data.tokenizer, "data.tokenizer");
  const fs::path out = open_run(c, o, "build-corpus");
  snapshot(out, c.data.manifest);
  const auto entries = read_manifest(c.data.manifest);
  const auto layout = c.layout();
  const int32_t L = c.data.context_length > 0 ? c.data.context_length : c.train.context2;
  std::vector<codec::Document> docs;
  if (entries.empty()) {
    log_warn("build-corpus: " + c.data.manifest + " lists no documents; writing an empty dataset");
  } else {
    auto tok = load_tok(c);
    if (tok.config().codebook_size != layout.codebook_size) throw std::invalid_argument("vocab mismatch: tokenizer vs layout codebook");
    for (const auto& e : entries) {
      vq::VisionGrid grid;
      try {
        grid = tok.tokenize(vq::read_rtf(e.media));
      } catch (const io::FormatError&) {
        throw;
      } catch (const std::exception& ex) {
        throw std::invalid_argument(e.media.string() + ": " + ex.what());
      }
      docs.push_back(codec::assemble_document(codec::encode_text(e.caption), grid, layout, e.mode));
    }
  }
  auto batch = codec::pack(docs, L, layout);
  int64_t tokens = 0, vision = 0;
  std::set<int32_t> rejected(batch.rejected.begin(), batch.rejected.end());
  for (size_t i = 0; i < docs.size(); ++i) {
    if (rejected.count(static_cast<int32_t>(i))) continue;
    tokens += static_cast<int64_t>(docs[i].size());
    for (int32_t id : docs[i].tokens) vision += id >= layout.vision_base();
  }
  json stats{{"documents", docs.size() - rejected.size()},
             {"tokens", tokens},
             {"vision_tokens", vision},
             {"vision_fraction", tokens ? static_cast<double>(vision) / static_cast<double>(tokens) : 0.0},
             {"rows", batch.rows.size()},
             {"context_length", L},
             {"rejected", batch.rejected}};
  codec::Dataset ds{layout, std::move(batch), stats.dump()};
  codec::save_dataset(out / "dataset.pkd", ds);
  write_json(out / "corpus_stats.json", stats);
}

void cmd_pretrain(const RunConfig& c, const Overrides& o) {
  require(c.data.dataset, "data.dataset");
  const auto stage = c.train.stage;
  if (stage != train::Stage::pretrain1 && stage != train::Stage::pretrain2)
    throw std::invalid_argument("pretrain: train.stage must be pretrain1 or pretrain2");
  const auto ds = codec::load_dataset(c.data.dataset);
  if (ds.batch.context_length > c.train.context_for(stage))
    throw std::invalid_argument("stage/context mismatch: dataset rows of " + std::to_string(ds.batch.context_length) + " exceed " +
                                train::stage_name(stage) + " context " + std::to_string(c.train.context_for(stage)));
  const int64_t begin = stage == train::Stage::pretrain1 ? 0 : c.train.stage1_steps;
  const int64_t end = stage == train::Stage::pretrain1 ? c.train.stage1_steps : c.train.total_steps;
  run_lm(c, o, stage, begin, end, ds, nullptr, "pretrain");
}

void cmd_qft(const RunConfig& c, const Overrides& o) {
  require(c.data.dataset, "data.dataset");
  const auto ds = codec::load_dataset(c.data.dataset);
  std::vector<std::vector<float>> weights;
  for (const auto& row : ds.batch.rows) weights.push_back(train::qft_row_weights(row, ds.layout));
  if (c.data.init.empty()) log_warn("qft: no data.init checkpoint; fine-tuning starts from random weights");
  run_lm(c, o, train::Stage::qft, 0, c.train.total_steps, ds, &weights, "qft");
}

void cmd_dpo(const RunConfig& c, const Overrides& o) {
  require(c.data.triplets, "data.triplets");
  if (c.data.reference.empty()) throw std::invalid_argument("dpo: a reference checkpoint (data.reference) is required");
  const fs::path out = open_run(c, o, "dpo");
  snapshot(out, c.data.triplets);
  const auto layout = c.layout();
  const auto triplets = read_triplets(c.data.triplets);
  if (triplets.empty()) throw std::invalid_argument(c.data.triplets + ": no triplets");
  for (size_t i = 0; i < triplets.size(); ++i) {
    try {
      train::validate_triplet(triplets[i], layout);
    } catch (const std::exception& e) {
      throw std::invalid_argument(c.data.triplets + ":" + std::to_string(i + 1) + ": " + e.what());
    }
  }
  const auto reference = load_model(c.data.reference, c);
  if (!(reference.config() == c.model)) throw std::invalid_argument("reference checkpoint model config differs from config");
  train::TrainConfig tc = c.train;
  tc.stage = train::Stage::dpo;
  const fs::path ckdir = out / "checkpoints";
  fs::create_directories(ckdir);
  train::MetricsLog log(out / "metrics.csv");
  std::optional<train::LmState> state;
  if (!o.resume.empty()) {
    state.emplace(train::lm_state_from_checkpoint(io::load_checkpoint(o.resume)));
    if (state->stage != train::Stage::dpo) throw std::invalid_argument("resume checkpoint is not a dpo checkpoint");
    log.truncate_from(state->step);
  } else {
    auto policy = reference.clone();
    if (!c.data.init.empty()) policy.copy_from(load_model(c.data.init, c));
    state.emplace(train::LmState{std::move(policy), AdamW{}, Rng(c.seed + 1), 0, train::Stage::dpo, c.seed});
  }
  auto& s = *state;
  for (; s.step < c.train.total_steps;) {
    std::vector<train::PreferenceTriplet> batch;
    for (size_t r : train::rows_for_step(s.step, c.train.batch_rows, triplets.size(), s.data_seed)) batch.push_back(triplets[r]);
    const double lr = train::stage_lr(tc, s.step);
    const auto m = train::dpo_step(s.model, reference, batch, s.opt, c.train.dpo_beta, c.train.dpo_lambda, lr);
    log.write(s.step, "dpo", m.total, lr, "dpo=" + fmt(m.dpo) + ";ce=" + fmt(m.ce) + ";margin=" + fmt(m.margin));
    ++s.step;
    if (s.step % c.train.checkpoint_every == 0 || s.step == c.train.total_steps) {
      io::save_checkpoint(ckdir / step_name(s.step), train::lm_checkpoint(s, {{"config_hash", config_hash(c)}}));
      prune(ckdir, c.train.keep_checkpoints);
    }
  }
  io::save_checkpoint(out / "final.ckpt", train::lm_checkpoint(s, {{"config_hash", config_hash(c)}}));
}

void cmd_generate(const RunConfig& c, const Overrides& o) {
  require(c.data.model, "data.model");
  const fs::path out = open_run(c, o, "generate");
  const auto layout = c.layout();
  const auto m = load_model(c.data.model, c);
  vq::VisionGrid shape;
  shape.kind = c.generate.kind == "video" ? vq::MediaKind::video : vq::MediaKind::image;
  shape.t = shape.kind == vq::MediaKind::video ? c.generate.t : 1;
  shape.h = c.generate.h;
  shape.w = c.generate.w;
  shape.codebook_size = layout.codebook_size;
  shape.cs = c.tokenizer.cs;
  shape.ct = shape.kind == vq::MediaKind::video ? c.tokenizer.ct : 1;
  shape.fps = shape.kind == vq::MediaKind::video ? c.generate.fps : 1;
  const auto caption = codec::encode_text(c.generate.caption);
  const auto g = sample::generate_image(m, caption, shape, layout, c.sample);
  auto meta = sidecar(c, o, "generate");
  meta["caption"] = c.generate.caption;
  write_outputs(c, out / "samples", "generate", g, meta);
}

void cmd_extend(const RunConfig& c, const Overrides& o) {
  require(c.data.model, "data.model");
  const fs::path out = open_run(c, o, "extend");
  const auto layout = c.layout();
  const auto m = load_model(c.data.model, c);
  const auto prefix = read_grid_input(c);
  const auto g = sample::extend_video(m, prefix, c.generate.frames, layout, c.sample, codec::encode_text(c.generate.caption));
  auto meta = sidecar(c, o, "extend");
  meta["prefix_frames"] = prefix.t;
  meta["added_frames"] = c.generate.frames;
  write_outputs(c, out / "samples", "extend", g, meta);
}

void cmd_caption(const RunConfig& c, const Overrides& o) {
  require(c.data.model, "data.model");
  const fs::path out = open_run(c, o, "caption");
  const auto m = load_model(c.data.model, c);
  const auto grid = read_grid_input(c);
  const auto text = sample::caption_image(m, grid, c.layout(), c.sample, c.generate.max_caption_tokens);
  auto meta = sidecar(c, o, "caption");
  meta["caption"] = text;
  meta["caption_bytes"] = codec::encode_text(text);
  write_json(out / "samples" / "caption.json", meta);
  std::printf("%s\n", text.c_str());
}

void cmd_eval_recon(const RunConfig& c, const Overrides& o) {
  require(c.data.tokenizer, "data.tokenizer");
  const std::string manifest = c.data.media_manifest.empty() ? c.data.manifest : c.data.media_manifest;
  require(manifest, "data.media_manifest");
  const fs::path out = open_run(c, o, "eval-recon");
  const auto tok = load_tok(c);
  const auto rows = recon_table(read_media(read_manifest(manifest)), [&](const vq::MediaClip& m) { return tok.reconstruct(m); });
  std::ofstream csv(out / "recon_report.csv", std::ios::trunc);
  if (!csv) throw std::runtime_error((out / "recon_report.csv").string() + ": cannot write");
  csv << "resolution,count,psnr,ssim\n";
  for (const auto& r : rows) csv << r.resolution << ',' << r.count << ',' << fmt(r.psnr) << ',' << fmt(r.ssim) << '\n';
}

}  // namespace mmt::cli
