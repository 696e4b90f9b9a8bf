#include "pipeline.hpp"

#include "tokenedit/parallel.hpp"

#include <CLI11.hpp>

#include <iostream>

namespace {

int fail(tokenedit::ErrorCode code, const std::string& message) {
  std::cerr << tokenedit::cli::error_json(code, message).dump() << '\n';
  return static_cast<int>(code);
}

}  // namespace

int main(int argc, char** argv) {
  using namespace tokenedit;

  CLI::App app{"Token-level MLP editing on a toy transformer", "tokenedit"};
  app.set_version_flag("--version", std::string(TOKENEDIT_VERSION));
  app.require_subcommand(1);

  std::optional<std::filesystem::path> config_path;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> threads;
  std::filesystem::path output_dir = ".";
  app.add_option("--config", config_path, "JSON config file")->check(CLI::ExistingFile);
  app.add_option("--set", overrides, "Dotted-path override, key=value (repeatable)");
  app.add_option("--seed", seed, "Global seed (same as --set seed=N)");
  app.add_option("--threads", threads, "Worker thread cap")->check(CLI::PositiveNumber);
  app.add_option("--output-dir", output_dir, "Directory for artifacts and manifests");

  std::optional<std::filesystem::path> checkpoint;
  std::optional<std::filesystem::path> reference;
  std::vector<std::string> prompts;
  const std::map<std::string, std::string> help = {
      {"gen-corpus", "Write the vocabulary and the synthetic corpus"},
      {"train", "Train the toy model on the corpus"},
      {"cov", "Accumulate moment caches for the edit layers"},
      {"edit", "Apply one batch of edits"},
      {"seq-edit", "Apply category-wise edit phases in sequence"},
      {"eval", "Score a checkpoint: ASR, KL and perplexity"},
      {"decode", "Greedy-decode prompts (debugging)"},
      {"pca", "Export a PCA projection of edit keys"},
  };
  for (const auto& name : cli::command_names()) {
    CLI::App* sub = app.add_subcommand(name, help.at(name));
    if (name == "eval" || name == "decode") {
      sub->add_option("--checkpoint", checkpoint, "Checkpoint to use instead of paths.checkpoint");
    }
    if (name == "eval") {
      sub->add_option("--reference", reference, "Reference checkpoint for KL and perplexity");
    }
    if (name == "decode") {
      sub->add_option("--prompt", prompts, "Prompt text (repeatable); default reads stdin lines");
    }
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail(ErrorCode::kUsage, e.what());
  }

  cli::Invocation inv;
  inv.command = app.get_subcommands().front()->get_name();
  inv.overrides = overrides;
  if (seed) inv.overrides.push_back("seed=" + std::to_string(*seed));
  inv.output_dir = output_dir;
  inv.checkpoint = checkpoint;
  inv.reference = reference;
  inv.prompts = prompts;
  if (threads) set_max_threads(*threads);

  try {
    inv.config = cli::load_config(config_path, inv.overrides);
    cli::run(inv, std::cin, std::cout);
  } catch (const Error& e) {
    return fail(e.code(), e.what());
  } catch (const nlohmann::json::exception& e) {
    return fail(ErrorCode::kInvalidConfig, e.what());
  } catch (const std::filesystem::filesystem_error& e) {
    return fail(ErrorCode::kIo, e.what());
  } catch (const std::exception& e) {
    return fail(ErrorCode::kGeneric, e.what());
  }
  return 0;
}
