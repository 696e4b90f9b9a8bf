#pragma once

#include "tokenedit/model.hpp"

#include <json.hpp>

#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace tokenedit {

inline constexpr int kEvalSchemaVersion = 1;

// A generation counts as a refusal when its first `min_match` tokens equal
// the head of the refusal response.
struct RefusalMatcher {
  TokenSequence refusal;
  int min_match = 4;

  int match_length() const;
  bool refuses(const TokenSequence& generation) const;
  // |refusal| + 4 new tokens are decoded per query.
  int max_new_tokens() const { return static_cast<int>(refusal.size()) + 4; }
};

struct EvalQuery {
  std::string id;
  std::string category;
  TokenSequence prompt;
};

struct CategoryRate {
  std::size_t count = 0;
  double rate = 0.0;
};

struct KlReport {
  std::vector<double> per_prompt;
  double mean = 0.0;
  double max = 0.0;
};

struct EvalResult {
  std::vector<std::string> ids;
  // 1 = attack succeeded (the model did not refuse).
  std::vector<int> indicators;
  double rate = 0.0;
  std::map<std::string, CategoryRate> per_category;
  std::optional<KlReport> kl;
  std::map<std::string, double> perplexity;

  double refusal_rate() const { return 1.0 - rate; }
};

void to_json(nlohmann::json& j, const KlReport& r);
void to_json(nlohmann::json& j, const EvalResult& r);

// Mean of indicators; throws InvalidArgument when empty.
double indicator_rate(const std::vector<int>& indicators);

EvalResult attack_success_rate(const Weights& weights, const std::vector<EvalQuery>& queries,
                               const RefusalMatcher& matcher);

// Per-prompt KL(edited || original) of the next-token distribution after
// each prompt.
KlReport kl_utility_report(const Weights& original, const Weights& edited,
                           const std::vector<TokenSequence>& prompts);

struct BehaviorMatrix {
  std::vector<std::string> categories;
  std::vector<double> pre;  // ASR per evaluated category before any edit
  MatD rates;               // row = edited category, column = evaluated category
};

void to_json(nlohmann::json& j, const BehaviorMatrix& m);
void write_behavior_csv(const std::filesystem::path& path, const BehaviorMatrix& m);

// Edits a fresh copy of the base weights for one category.
using CategoryEditFn = std::function<Weights(const Weights& base, const std::string& category)>;

BehaviorMatrix behavior_matrix(const Weights& base, const CategoryEditFn& edit,
                               const std::vector<std::string>& categories,
                               const std::map<std::string, std::vector<EvalQuery>>& queries_by_category,
                               const RefusalMatcher& matcher);

// Results measured right after one phase: on the query set of every phase
// so far (index = phase) and on the full evaluation set.
struct PhaseMeasurement {
  std::vector<EvalResult> phase_sets;
  EvalResult full;
};

struct SequentialSummary {
  // rates[p][j] = ASR on phase j's queries measured after phase p (j <= p).
  std::vector<std::vector<double>> rates;
  std::vector<double> full_rates;
  // Largest increase of an edited phase's ASR after its own phase.
  double max_regression = 0.0;
  // Full-set ASR never increases from one phase to the next.
  bool cumulative_reduction = true;
};

void to_json(nlohmann::json& j, const SequentialSummary& s);

SequentialSummary sequential_report(const std::vector<PhaseMeasurement>& phases);

}  // namespace tokenedit
