#include "mmt/vq/tokenizer_io.hpp"

#include <set>
#include <stdexcept>

namespace mmt::vq {

nlohmann::json config_to_json(const TokenizerConfig& c) {
  return {{"ct", c.ct},
          {"cs", c.cs},
          {"codebook_size", c.codebook_size},
          {"latent_dim", c.latent_dim},
          {"base_channels", c.base_channels},
          {"norm_groups", c.norm_groups},
          {"commitment", c.commitment},
          {"dead_code_steps", c.dead_code_steps}};
}

TokenizerConfig tokenizer_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw std::invalid_argument("tokenizer config must be a JSON object");
  static const std::set<std::string> known{"ct", "cs", "codebook_size", "latent_dim", "base_channels", "norm_groups", "commitment",
                                           "dead_code_steps"};
  for (const auto& [k, v] : j.items())
    if (!known.count(k)) throw std::invalid_argument("unknown tokenizer config key '" + k + "'");
  TokenizerConfig c;
  c.ct = j.value("ct", c.ct);
  c.cs = j.value("cs", c.cs);
  c.codebook_size = j.value("codebook_size", c.codebook_size);
  c.latent_dim = j.value("latent_dim", c.latent_dim);
  c.base_channels = j.value("base_channels", c.base_channels);
  c.norm_groups = j.value("norm_groups", c.norm_groups);
  c.commitment = j.value("commitment", c.commitment);
  c.dead_code_steps = j.value("dead_code_steps", c.dead_code_steps);
  c.validate();
  return c;
}

io::Checkpoint tokenizer_checkpoint(const VqTokenizer& tok, const AdamW* opt) {
  io::Checkpoint ck;
  const auto st = tok.state();
  ck.header = {{"kind", "tokenizer"},
               {"config", config_to_json(tok.config())},
               {"quantize_calls", st.quantize_calls},
               {"positions_quantized", st.positions_quantized},
               {"codebook_ready", st.codebook_ready}};
  io::put_params(ck, tok.parameters());
  ck.put_i64("codebook.usage", st.usage);
  ck.put_i64("codebook.idle", st.idle);
  ck.put_bytes("rng.tokenizer", st.rng);
  if (opt) io::put_optimizer(ck, *opt);
  return ck;
}

VqTokenizer tokenizer_from_checkpoint(const io::Checkpoint& ck, AdamW* opt) {
  if (ck.header.value("kind", "") != "tokenizer")
    throw std::invalid_argument("checkpoint is not a tokenizer checkpoint (kind '" + ck.header.value("kind", "") + "')");
  VqTokenizer tok(tokenizer_config_from_json(ck.header.at("config")));
  io::load_params(ck, tok.parameters());
  VqTokenizer::State st;
  st.usage = ck.get_i64("codebook.usage");
  st.idle = ck.get_i64("codebook.idle");
  st.quantize_calls = ck.header.at("quantize_calls").get<int64_t>();
  st.positions_quantized = ck.header.at("positions_quantized").get<int64_t>();
  st.codebook_ready = ck.header.at("codebook_ready").get<bool>();
  st.rng = ck.get_bytes("rng.tokenizer");
  tok.restore_state(st);
  if (opt) {
    if (!ck.has("adam.step")) throw std::invalid_argument("tokenizer checkpoint carries no optimizer state");
    io::load_optimizer(ck, *opt, tok.parameters());
  }
  return tok;
}

void save_tokenizer(const std::filesystem::path& path, const VqTokenizer& tok, const AdamW* opt) {
  io::save_checkpoint(path, tokenizer_checkpoint(tok, opt));
}

VqTokenizer load_tokenizer(const std::filesystem::path& path, AdamW* opt) {
  return tokenizer_from_checkpoint(io::load_checkpoint(path), opt);
}

}  // namespace mmt::vq
