#pragma once

#include "tokenedit/corpus.hpp"
#include "tokenedit/model.hpp"

#include <json.hpp>

#include <cstdint>
#include <vector>

namespace tokenedit {

struct TrainOptions {
  int epochs = 40;
  double lr = 3e-3;
  int batch_size = 8;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double grad_clip = 1.0;  // global L2 norm; <= 0 disables
  // Cosine decay from lr to lr * min_lr_fraction over all steps; 1 keeps lr constant.
  double min_lr_fraction = 0.1;
  std::uint64_t seed = 42;
};

void to_json(nlohmann::json& j, const TrainOptions& o);
void from_json(const nlohmann::json& j, TrainOptions& o);

struct TrainResult {
  Weights weights;
  std::vector<double> epoch_losses;  // mean completion-token NLL per epoch
};

// Next-token cross-entropy on completion tokens, Adam moments, shuffled
// mini-batches. Weights are initialized from config.seed and the shuffle order
// from options.seed. Throws NumericError naming the step on divergence.
TrainResult train_lm(const ModelConfig& config, const Corpus& corpus, const TrainOptions& options);

// Continues training from existing weights.
TrainResult train_lm(Weights weights, const Corpus& corpus, const TrainOptions& options);

// Mean NLL and exp(mean NLL) over the completion tokens of the records.
double mean_completion_nll(const Weights& weights, const std::vector<CorpusRecord>& records);
double perplexity(const Weights& weights, const std::vector<CorpusRecord>& records);
double perplexity(const Weights& weights, const Corpus& corpus);

// Fraction of harmful records whose greedy continuation starts with the first
// `prefix_len` completion tokens.
double compliance_rate(const Weights& weights, const Corpus& corpus, int prefix_len = 4);

}  // namespace tokenedit
