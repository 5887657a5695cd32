#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include "mmt/cli/run.hpp"
#include "mmt/vq/tokenizer_io.hpp"

namespace mmt::cli {

namespace {

using nlohmann::json;

void reject_unknown(const json& j, const std::set<std::string>& known, const std::string& where) {
  if (!j.is_object()) throw std::invalid_argument("config: '" + where + "' must be an object");
  for (const auto& [k, v] : j.items())
    if (!known.count(k)) throw std::invalid_argument("config: unknown key '" + where + "." + k + "'");
}

std::string resolve(const std::string& p, const std::filesystem::path& base) {
  if (p.empty() || base.empty()) return p;
  std::filesystem::path path(p);
  return path.is_absolute() ? p : (base / path).lexically_normal().string();
}

uint64_t fnv1a(const std::string& s) {
  uint64_t h = 1469598103934665603ull;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace

json to_json(const RunConfig& c) {
  const auto& d = c.data;
  const auto& g = c.generate;
  return {{"seed", c.seed},
          {"text_size", c.text_size},
          {"model", model::config_to_json(c.model)},
          {"tokenizer", vq::config_to_json(c.tokenizer)},
          {"train", train::config_to_json(c.train)},
          {"sample", sample::params_to_json(c.sample)},
          {"tokenizer_train",
           {{"steps", c.tokenizer_train.steps},
            {"batch", c.tokenizer_train.batch},
            {"lr", c.tokenizer_train.lr},
            {"holdout_every", c.tokenizer_train.holdout_every}}},
          {"data",
           {{"manifest", d.manifest},
            {"media_manifest", d.media_manifest},
            {"triplets", d.triplets},
            {"dataset", d.dataset},
            {"tokenizer", d.tokenizer},
            {"model", d.model},
            {"init", d.init},
            {"reference", d.reference},
            {"context_length", d.context_length}}},
          {"generate",
           {{"caption", g.caption},
            {"kind", g.kind},
            {"t", g.t},
            {"h", g.h},
            {"w", g.w},
            {"fps", g.fps},
            {"input", g.input},
            {"frames", g.frames},
            {"max_caption_tokens", g.max_caption_tokens}}}};
}

RunConfig run_config_from_json(const json& j, const std::filesystem::path& base_dir) {
  reject_unknown(j, {"seed", "text_size", "model", "tokenizer", "train", "sample", "tokenizer_train", "data", "generate"}, "config");
  RunConfig c;
  c.seed = j.value("seed", c.seed);
  c.text_size = j.value("text_size", c.text_size);
  if (c.text_size < 1) throw std::invalid_argument("config: text_size must be positive");
  if (j.contains("tokenizer")) c.tokenizer = vq::tokenizer_config_from_json(j.at("tokenizer"));
  c.tokenizer.validate();
  c.model.vocab = c.layout().total();
  if (j.contains("model")) {
    auto m = j.at("model");
    if (!m.contains("vocab")) m["vocab"] = c.model.vocab;
    c.model = model::model_config_from_json(m);
  }
  if (j.contains("train")) c.train = train::train_config_from_json(j.at("train"));
  c.sample.top_k = std::min(sample::kDefaultTopK, c.tokenizer.codebook_size);
  c.sample.seed = c.seed;
  if (j.contains("sample")) {
    auto s = j.at("sample");
    if (!s.contains("top_k")) s["top_k"] = c.sample.top_k;
    if (!s.contains("seed")) s["seed"] = c.seed;
    c.sample = sample::params_from_json(s);
  }
  if (j.contains("tokenizer_train")) {
    const auto& t = j.at("tokenizer_train");
    reject_unknown(t, {"steps", "batch", "lr", "holdout_every"}, "tokenizer_train");
    c.tokenizer_train.steps = t.value("steps", c.tokenizer_train.steps);
    c.tokenizer_train.batch = t.value("batch", c.tokenizer_train.batch);
    c.tokenizer_train.lr = t.value("lr", c.tokenizer_train.lr);
    c.tokenizer_train.holdout_every = t.value("holdout_every", c.tokenizer_train.holdout_every);
    if (c.tokenizer_train.steps < 0 || c.tokenizer_train.batch < 1 || c.tokenizer_train.holdout_every < 0)
      throw std::invalid_argument("config: tokenizer_train values out of range");
  }
  if (j.contains("data")) {
    const auto& d = j.at("data");
    reject_unknown(d, {"manifest", "media_manifest", "triplets", "dataset", "tokenizer", "model", "init", "reference", "context_length"},
                   "data");
    auto path = [&](const char* key) { return resolve(d.value(key, std::string()), base_dir); };
    c.data.manifest = path("manifest");
    c.data.media_manifest = path("media_manifest");
    c.data.triplets = path("triplets");
    c.data.dataset = path("dataset");
    c.data.tokenizer = path("tokenizer");
    c.data.model = path("model");
    c.data.init = path("init");
    c.data.reference = path("reference");
    c.data.context_length = d.value("context_length", 0);
    if (c.data.context_length < 0) throw std::invalid_argument("config: data.context_length must be nonnegative");
  }
  if (j.contains("generate")) {
    const auto& g = j.at("generate");
    reject_unknown(g, {"caption", "kind", "t", "h", "w", "fps", "input", "frames", "max_caption_tokens"}, "generate");
    auto& o = c.generate;
    o.caption = g.value("caption", o.caption);
    o.kind = g.value("kind", o.kind);
    o.t = g.value("t", o.t);
    o.h = g.value("h", o.h);
    o.w = g.value("w", o.w);
    o.fps = g.value("fps", o.fps);
    o.input = resolve(g.value("input", o.input), base_dir);
    o.frames = g.value("frames", o.frames);
    o.max_caption_tokens = g.value("max_caption_tokens", o.max_caption_tokens);
    if (o.kind != "image" && o.kind != "video") throw std::invalid_argument("config: generate.kind must be image or video");
    if (o.t < 1 || o.h < 1 || o.w < 1 || o.fps < 1 || o.frames < 0 || o.max_caption_tokens < 0)
      throw std::invalid_argument("config: generate dims out of range");
  }
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error(path.string() + ": cannot open config");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw std::invalid_argument(path.string() + ": byte " + std::to_string(e.byte) + ": invalid JSON");
  }
  return run_config_from_json(j, std::filesystem::absolute(path).parent_path());
}

std::string config_hash(const RunConfig& c) {
  std::ostringstream s;
  s << std::hex << fnv1a(to_json(c).dump());
  std::string h = s.str();
  return std::string(16 - h.size(), '0') + h;
}

}  // namespace mmt::cli
