#include <CLI11.hpp>

#include <cstdio>
#include <functional>
#include <map>
#include <string>

#include <json.hpp>

#include "mmt/cli/run.hpp"
#include "mmt/io/error.hpp"

namespace {

using Command = std::function<void(const mmt::cli::RunConfig&, const mmt::cli::Overrides&)>;

std::string one_line(std::string s) {
  for (char& ch : s)
    if (ch == '\n' || ch == '\r') ch = ' ';
  return s;
}

int fail(const std::string& command, const std::string& kind, const std::string& message) {
  nlohmann::json e{{"error", kind}, {"command", command}, {"message", one_line(message)}};
  std::fprintf(stderr, "%s\n", e.dump().c_str());
  return kind == "usage" ? 2 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  const std::map<std::string, std::pair<Command, std::string>> commands{
      {"train-tokenizer", {mmt::cli::cmd_train_tokenizer, "train the VQ tokenizer on a media manifest"}},
      {"build-corpus", {mmt::cli::cmd_build_corpus, "tokenize a manifest into a packed dataset"}},
      {"pretrain", {mmt::cli::cmd_pretrain, "next-token pretraining (stage from train.stage)"}},
      {"qft", {mmt::cli::cmd_qft, "quality fine-tuning on vision tokens only"}},
      {"dpo", {mmt::cli::cmd_dpo, "preference optimization against a frozen reference"}},
      {"generate", {mmt::cli::cmd_generate, "sample an image or video grid from a caption"}},
      {"extend", {mmt::cli::cmd_extend, "append frames to a video grid"}},
      {"caption", {mmt::cli::cmd_caption, "describe an image grid"}},
      {"eval-recon", {mmt::cli::cmd_eval_recon, "per-resolution PSNR / SSIM of tokenizer reconstructions"}},
  };

  CLI::App app{"multimodal next-token toolkit"};
  app.require_subcommand(1);
  std::string config_path, resume, out = "run";
  uint64_t seed = 0;
  std::map<std::string, CLI::App*> subs;
  for (const auto& [name, entry] : commands) {
    auto* sub = app.add_subcommand(name, entry.second);
    sub->add_option("--config", config_path, "run configuration (JSON)")->required();
    sub->add_option("--resume", resume, "checkpoint to continue from");
    sub->add_option("--seed", seed, "overrides the config seed");
    sub->add_option("--out", out, "run directory");
    subs[name] = sub;
  }

  std::string command = "?";
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    for (const auto& [name, sub] : subs)
      if (sub->parsed()) command = name;
    return fail(command, "usage", e.what());
  }
  for (const auto& [name, sub] : subs)
    if (sub->parsed()) command = name;

  try {
    auto config = mmt::cli::load_run_config(config_path);
    mmt::cli::Overrides o;
    if (subs[command]->count("--seed")) {
      o.seed = seed;
      config.seed = seed;
      config.sample.seed = seed;
    }
    o.resume = resume;
    o.out = out;
    commands.at(command).first(config, o);
  } catch (const mmt::io::FormatError& e) {
    return fail(command, "format", e.what());
  } catch (const std::invalid_argument& e) {
    return fail(command, "invalid", e.what());
  } catch (const std::out_of_range& e) {
    return fail(command, "range", e.what());
  } catch (const std::length_error& e) {
    return fail(command, "length", e.what());
  } catch (const std::exception& e) {
    return fail(command, "runtime", e.what());
  }
  return 0;
}
