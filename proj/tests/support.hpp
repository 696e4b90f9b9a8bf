#pragma once

#include "pipeline.hpp"

#include "tokenedit/desk.hpp"
#include "tokenedit/evalsuite.hpp"

#include <filesystem>
#include <map>
#include <random>
#include <string>
#include <vector>

namespace tokenedit::testing {

// Every tensor drawn from N(0, scale^2); norm scales from N(1, 0.2^2) so the
// norm parameters are exercised too.
WeightsD random_weights(const ModelConfig& config, std::uint64_t seed, double scale = 0.5);

ModelConfig small_config(int n_layers = 2, int d_model = 16, int d_mlp = 32, int n_heads = 2, int vocab = 24,
                         int max_seq_len = 16, std::uint64_t seed = 1);

TokenSequence random_tokens(std::mt19937_64& rng, int length, int vocab);

// Fresh empty directory under the build tree.
std::filesystem::path scratch_dir(const std::string& name);

double relative_frobenius(const MatD& a, const MatD& b);

// The trained desk model and its evaluation suite, built with the CLI's
// default configuration. The checkpoint is cached on disk under its model
// stage hash, so only the first test to need it pays for training.
struct Desk {
  cli::PipelineConfig config;
  Vocabulary vocab;
  Corpus corpus;
  Weights weights;
  double train_seconds = 0.0;
  std::vector<double> epoch_losses;
  DeskSuite suite;
  RefusalMatcher matcher;

  EditContext context() const;
  std::map<int, MomentCache> caches(const Weights& w) const;
  EditOutcome edit(const Weights& w, const std::vector<EditRequest>& requests, const EditConfig& edit_cfg,
                   const ValuationConfig& val_cfg, const std::string& batch_id = "batch-0") const;
};

const Desk& desk();

}  // namespace tokenedit::testing
