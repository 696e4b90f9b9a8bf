#pragma once

#include "tokenedit/covariance.hpp"
#include "tokenedit/keying.hpp"
#include "tokenedit/valuation.hpp"

#include <json.hpp>

#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace tokenedit {

enum class SourceMode { kLocal, kRemote };
SourceMode parse_source_mode(const std::string& text);
std::string to_string(SourceMode m);

struct EditConfig {
  std::vector<int> target_layers = {1, 2};
  double moment_weight = 15000.0;
  int n_contexts = 5;
  // kLocal = lexicon extraction and template contexts.
  SourceMode extractor = SourceMode::kLocal;
  SourceMode generator = SourceMode::kLocal;

  int last_layer() const { return target_layers.back(); }
  void validate(const ModelConfig& model) const;
};

void to_json(nlohmann::json& j, const EditConfig& c);
void from_json(const nlohmann::json& j, EditConfig& c);

struct EditRequest {
  std::string id;
  std::string query;
  // When absent the harmful token is extracted from the query.
  std::optional<std::string> harmful_token;
  std::string category;
  std::string y_target = std::string(kRefusalText);
};

void to_json(nlohmann::json& j, const EditRequest& r);
void from_json(const nlohmann::json& j, EditRequest& r);
std::vector<EditRequest> load_edit_requests(const std::filesystem::path& path);
void save_edit_requests(const std::filesystem::path& path, const std::vector<EditRequest>& requests);

// (V - W_down^L K^L) / (L - l + 1).
MatD compute_residual(const MatD& values, const MatD& w_down_last, const MatD& keys_last, int layer,
                      int last_layer);

struct SolveReport {
  int layer = 0;
  double condition = 0.0;
  double jitter = 0.0;
  double delta_norm = 0.0;
};

void to_json(nlohmann::json& j, const SolveReport& r);

// W + R K^T (C~ + K K^T)^-1 with C~ = (moment_weight / sample_count) C,
// via a Cholesky solve. Throws NumericError naming the layer when the system
// is singular or its condition estimate exceeds 1e12.
MatD solve_update(const MatD& w, const MatD& keys, const MatD& residual, const MatD& second_moment,
                  double moment_weight, std::uint64_t sample_count, int layer = -1,
                  SolveReport* report = nullptr);

struct RequestReport {
  std::string id;
  std::string query;
  std::string token;
  std::string category;
  bool skipped = false;
  std::string skip_reason;
  std::vector<double> loss_history;
  std::vector<double> safe_history;
  std::vector<double> utility_history;
  double v_init_norm = 0.0;
  double v_star_norm = 0.0;
  // ||W_down^L k^L - v*|| / ||v*|| after the edit.
  double constraint_gap = 0.0;
};

void to_json(nlohmann::json& j, const RequestReport& r);

struct EditReport {
  std::string batch_id;
  std::vector<RequestReport> requests;
  std::vector<SolveReport> layers;
  double seconds = 0.0;
  EditConfig edit_config;
  ValuationConfig valuation_config;
  std::uint64_t seed = 0;
  std::string weights_before;
  std::string weights_after;
  // Filled by callers with pre/post evaluation results.
  nlohmann::json metrics = nlohmann::json::object();
};

void to_json(nlohmann::json& j, const EditReport& r);

struct EditContext {
  const Vocabulary* vocab = nullptr;
  HarmLexicon lexicon;
  ChatCompletionClient* remote = nullptr;
};

struct EditOutcome {
  Weights weights;
  EditReport report;
};

// One batch of the layer-spread edit. `caches` must hold a moment cache for
// every target layer built from `weights`.
EditOutcome apply_edit_batch(const Weights& weights, const EditContext& ctx,
                             const std::vector<EditRequest>& requests, const EditConfig& edit_cfg,
                             const ValuationConfig& val_cfg, const std::map<int, MomentCache>& caches,
                             std::uint64_t seed, const std::string& batch_id = "batch-0");

// Builds fresh caches for the target layers from a neutral corpus.
using CacheProvider = std::function<std::map<int, MomentCache>(const Weights&, const std::vector<int>&)>;
// Called after each phase with the phase index; its result lands in the
// phase report's metrics.
using PhaseProbe = std::function<nlohmann::json(const Weights&, std::size_t phase)>;

struct SequentialOutcome {
  Weights weights;
  std::vector<EditReport> phases;
};

SequentialOutcome sequential_edit(const Weights& weights, const EditContext& ctx,
                                  const std::vector<std::vector<EditRequest>>& batches,
                                  const EditConfig& edit_cfg, const ValuationConfig& val_cfg,
                                  const CacheProvider& caches, std::uint64_t seed,
                                  const PhaseProbe& probe = nullptr);

// Manifest entry appended to a checkpoint's "edits" list.
nlohmann::json edit_provenance(const EditReport& report, const std::string& config_hash);

}  // namespace tokenedit
