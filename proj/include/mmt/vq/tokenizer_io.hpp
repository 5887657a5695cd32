#pragma once

#include <filesystem>

#include <json.hpp>

#include "mmt/io/checkpoint.hpp"
#include "mmt/vq/tokenizer.hpp"

namespace mmt::vq {

nlohmann::json config_to_json(const TokenizerConfig& c);
// Missing keys keep their defaults; unknown keys are rejected.
TokenizerConfig tokenizer_config_from_json(const nlohmann::json& j);

// Parameters, codebook statistics and RNG; optimizer state when given.
io::Checkpoint tokenizer_checkpoint(const VqTokenizer& tok, const AdamW* opt = nullptr);
VqTokenizer tokenizer_from_checkpoint(const io::Checkpoint& ckpt, AdamW* opt = nullptr);

void save_tokenizer(const std::filesystem::path& path, const VqTokenizer& tok, const AdamW* opt = nullptr);
VqTokenizer load_tokenizer(const std::filesystem::path& path, AdamW* opt = nullptr);

}  // namespace mmt::vq
