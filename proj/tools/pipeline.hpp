#pragma once

#include "tokenedit/corpus.hpp"
#include "tokenedit/covariance.hpp"
#include "tokenedit/editor.hpp"
#include "tokenedit/model.hpp"
#include "tokenedit/remote_client.hpp"
#include "tokenedit/trainer.hpp"
#include "tokenedit/valuation.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace tokenedit::cli {

// Relative paths resolve against the output directory.
struct Paths {
  std::string vocabulary = "vocab.json";
  std::string corpus = "corpus.jsonl";
  std::string checkpoint = "model.ckpt";
  std::string edited_checkpoint = "edited.ckpt";
  std::string sequential_checkpoint = "sequential.ckpt";
  std::string caches = "caches";
  // Empty means the desk suite's requests.
  std::string edit_requests;
  std::string reports = "reports";
};

struct CovarianceOptions {
  PositionSelection positions = PositionSelection::kAll;
  int shards = 1;
};

struct EvalOptions {
  std::vector<std::string> query_sets = {"edit", "paraphrase", "full"};
  int words_per_category = 5;
  int benign_prompts = 50;
  int min_match = 4;
  bool behavior_matrix = false;
};

struct DecodeOptions {
  int max_new_tokens = 16;
};

struct PcaOptions {
  // -1 = the last edit layer.
  int layer = -1;
  int dims = 2;
  std::string output = "keys_pca.csv";
};

struct PipelineConfig {
  // Seeds editing (context sampling) and everything downstream of it.
  std::uint64_t seed = 42;
  int vocabulary_size = 512;
  Paths paths;
  ModelConfig model;
  CorpusSpec corpus;
  TrainOptions train;
  CovarianceOptions covariance;
  EditConfig edit;
  ValuationConfig valuation;
  EvalOptions eval;
  DecodeOptions decode;
  PcaOptions pca;
  RemoteSettings remote;

  // The desk profile for edit and valuation; library defaults elsewhere.
  static PipelineConfig defaults();
  // Throws Error(kInvalidConfig).
  void validate() const;
};

void to_json(nlohmann::json& j, const PipelineConfig& c);
void from_json(const nlohmann::json& j, PipelineConfig& c);

// Overlays `patch` onto `base`. Every key in `patch` must already exist in
// `base`; objects merge recursively and anything else replaces.
void merge_strict(nlohmann::json& base, const nlohmann::json& patch, const std::string& where = "");

// "a.b.c=value". The value is parsed as JSON when it parses, else taken as a
// string. The path must name an existing key.
void apply_override(nlohmann::json& config, const std::string& assignment);

// Defaults, then the config file (if any), then the overrides in order.
PipelineConfig load_config(const std::optional<std::filesystem::path>& file,
                           const std::vector<std::string>& overrides);

std::string config_hash(const PipelineConfig& c);

// Hash of the config sections that shape each artifact kind. A downstream
// command refuses an input whose recorded stage hash differs from the one
// its own config implies.
std::string corpus_stage_hash(const PipelineConfig& c);
std::string model_stage_hash(const PipelineConfig& c);
std::string cache_stage_hash(const PipelineConfig& c);

struct Invocation {
  std::string command;
  PipelineConfig config;
  std::vector<std::string> overrides;
  std::filesystem::path output_dir = ".";
  // eval: checkpoint to score and the reference for KL/perplexity.
  std::optional<std::filesystem::path> checkpoint;
  std::optional<std::filesystem::path> reference;
  // decode: prompts; empty reads one prompt per stdin line.
  std::vector<std::string> prompts;
};

inline const std::vector<std::string>& command_names() {
  static const std::vector<std::string> names = {"gen-corpus", "train", "cov", "edit",
                                                 "seq-edit",   "eval",  "decode", "pca"};
  return names;
}

// Runs one subcommand, writing artifacts under the output directory and
// "<command>.manifest.json". Human-readable progress goes to `out`.
// Throws tokenedit::Error subclasses on failure.
void run(const Invocation& inv, std::istream& in, std::ostream& out);

// {"error": name, "exit_code": n, "message": ...}
nlohmann::json error_json(ErrorCode code, const std::string& message);

}  // namespace tokenedit::cli
