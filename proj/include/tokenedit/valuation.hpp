#pragma once

#include "tokenedit/keying.hpp"
#include "tokenedit/model.hpp"

#include <json.hpp>

#include <string>
#include <vector>

namespace tokenedit {

enum class Regularizer { kKl, kJs, kCosine };
enum class ValueOptimizer { kAdam, kSgd };

Regularizer parse_regularizer(const std::string& text);
std::string to_string(Regularizer r);
ValueOptimizer parse_value_optimizer(const std::string& text);
std::string to_string(ValueOptimizer o);

struct ValuationConfig {
  double lr = 0.5;
  double weight_decay = 0.5;
  int steps = 25;
  double kl_factor = 0.0625;
  double clamp_factor = 0.75;
  // Layer whose output head scores the target; -1 means the final layer,
  // the only one the toy model exposes probabilities for.
  int loss_layer = -1;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  Regularizer regularizer = Regularizer::kKl;
  // kSgd takes plain gradient steps; used for monotonicity diagnostics.
  ValueOptimizer optimizer = ValueOptimizer::kAdam;

  void validate(const ModelConfig& model) const;
};

void to_json(nlohmann::json& j, const ValuationConfig& c);
void from_json(const nlohmann::json& j, ValuationConfig& c);

template <typename S>
struct ValueTarget {
  HarmfulToken token;
  TokenSequence query;           // starts with <bos>
  TokenSequence neutral_prompt;  // "what is {token} ?"
  TokenSequence y_target;
  int layer = 0;
  int position = 0;          // last sub-token of the token in query
  int neutral_position = 0;  // same, in neutral_prompt
  Vec<S> v_init;
  Vec<S> v_star;
  Vec<S> neutral_reference;  // unpatched next-token log-probabilities after neutral_prompt
  std::vector<double> loss_history;  // joint objective, steps + 1 entries
  std::vector<double> safe_history;
  std::vector<double> utility_history;
};

// Fills positions, v_init and the neutral reference from an unmodified
// forward pass of `weights`.
template <typename S>
ValueTarget<S> make_value_target(const ModelWeights<S>& weights, const Vocabulary& vocab, int layer,
                                 const HarmfulToken& token, const TokenSequence& query,
                                 const TokenSequence& y_target);

// The neutral prompt for a token: "<bos> what is {token} ?".
TokenSequence neutral_prompt_for(const Vocabulary& vocab, const HarmfulToken& token);

// Mean negative log-likelihood of y_target after query with m^layer at
// `position` replaced by v.
template <typename S>
S safe_loss(const ModelWeights<S>& weights, int layer, int position, const Vec<S>& v,
            const TokenSequence& query, const TokenSequence& y_target);

// Loss and d/d(logits) for a teacher-forced target; usable as a LogitLoss.
template <typename S>
LogitLoss<S> safe_logit_loss(int query_length, const TokenSequence& y_target);

// Divergence of the patched next-token distribution p = softmax(logits) from
// the reference q, given as log-probabilities. Writes d/d(logit row) into grad when non-null.
template <typename S>
S divergence(Regularizer kind, const Vec<S>& logits, const Vec<S>& reference, Vec<S>* grad);

template <typename S>
LogitLoss<S> utility_logit_loss(Regularizer kind, const Vec<S>& reference);

// Divergence between the v-patched and unpatched next-token distributions
// after neutral_prompt.
template <typename S>
S utility_loss(const ModelWeights<S>& weights, int layer, int position, const Vec<S>& v,
               const TokenSequence& neutral_prompt, Regularizer kind);

struct JointLoss {
  double total;
  double safe;
  double utility;
};

// L_safe + kl_factor * L_utility and its gradient in v.
template <typename S>
JointLoss joint_loss(const ModelWeights<S>& weights, const ValueTarget<S>& target, const Vec<S>& v,
                     const ValuationConfig& cfg, Vec<S>* grad);

template <typename S>
ValueTarget<S> optimize_value(const ModelWeights<S>& weights, ValueTarget<S> target,
                              const ValuationConfig& cfg);

}  // namespace tokenedit
