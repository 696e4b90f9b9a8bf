#include "support.hpp"

#include "tokenedit/checkpoint.hpp"

#include <chrono>
#include <mutex>

#ifndef TOKENEDIT_TEST_DATA_DIR
#define TOKENEDIT_TEST_DATA_DIR "test_data"
#endif

namespace tokenedit::testing {

namespace fs = std::filesystem;

WeightsD random_weights(const ModelConfig& config, std::uint64_t seed, double scale) {
  WeightsD w = WeightsD::zeros(config);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, scale);
  std::normal_distribution<double> near_one(1.0, 0.2);
  for (auto& t : w.tensors()) {
    const bool is_scale = t.name.find("scale") != std::string::npos;
    for (Eigen::Index i = 0; i < t.size(); ++i) t.data[i] = is_scale ? near_one(rng) : normal(rng);
  }
  return w;
}

ModelConfig small_config(int n_layers, int d_model, int d_mlp, int n_heads, int vocab, int max_seq_len,
                         std::uint64_t seed) {
  ModelConfig c;
  c.n_layers = n_layers;
  c.d_model = d_model;
  c.d_mlp = d_mlp;
  c.n_heads = n_heads;
  c.vocab_size = vocab;
  c.max_seq_len = max_seq_len;
  c.seed = seed;
  return c;
}

TokenSequence random_tokens(std::mt19937_64& rng, int length, int vocab) {
  std::uniform_int_distribution<int> pick(0, vocab - 1);
  TokenSequence out(static_cast<std::size_t>(length));
  for (auto& t : out) t = pick(rng);
  return out;
}

fs::path scratch_dir(const std::string& name) {
  const fs::path dir = fs::path(TOKENEDIT_TEST_DATA_DIR) / "scratch" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

double relative_frobenius(const MatD& a, const MatD& b) {
  const double denom = b.norm();
  return (a - b).norm() / (denom > 0 ? denom : 1.0);
}

EditContext Desk::context() const { return {&vocab, make_harm_lexicon(config.corpus.categories), nullptr}; }

std::map<int, MomentCache> Desk::caches(const Weights& w) const {
  std::map<int, MomentCache> out;
  for (auto& c : accumulate_layers(w, corpus.benign(), config.edit.target_layers, config.covariance.positions)) {
    out.emplace(c.layer, std::move(c));
  }
  return out;
}

EditOutcome Desk::edit(const Weights& w, const std::vector<EditRequest>& requests, const EditConfig& edit_cfg,
                       const ValuationConfig& val_cfg, const std::string& batch_id) const {
  std::map<int, MomentCache> cs;
  for (auto& c : accumulate_layers(w, corpus.benign(), edit_cfg.target_layers, config.covariance.positions)) {
    cs.emplace(c.layer, std::move(c));
  }
  return apply_edit_batch(w, context(), requests, edit_cfg, val_cfg, cs, config.seed, batch_id);
}

namespace {

Desk build_desk() {
  Desk d;
  d.config = cli::PipelineConfig::defaults();
  d.vocab = default_vocabulary(static_cast<std::size_t>(d.config.vocabulary_size));
  d.corpus = generate_corpus(d.config.corpus, d.vocab);

  const std::string stage = cli::model_stage_hash(d.config);
  const fs::path dir = fs::path(TOKENEDIT_TEST_DATA_DIR);
  const fs::path path = dir / ("desk_" + stage + ".ckpt");
  if (fs::exists(path)) {
    Checkpoint ck = load_checkpoint(path);
    if (ck.extra.value("model_stage", "") == stage) {
      d.weights = std::move(ck.weights);
      d.train_seconds = ck.extra.value("train_seconds", 0.0);
      d.epoch_losses = ck.extra.value("epoch_losses", std::vector<double>{});
    }
  }
  if (d.weights.layers.empty()) {
    const auto start = std::chrono::steady_clock::now();
    TrainResult r = train_lm(d.config.model, d.corpus, d.config.train);
    d.train_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    d.weights = std::move(r.weights);
    d.epoch_losses = r.epoch_losses;
    Checkpoint ck{d.weights};
    ck.extra = {{"model_stage", stage}, {"train_seconds", d.train_seconds}, {"epoch_losses", r.epoch_losses}};
    fs::create_directories(dir);
    // Written under a unique name and renamed so concurrent tests never see a partial file.
    const fs::path tmp = dir / ("desk_" + stage + "." + std::to_string(std::random_device{}()) + ".tmp");
    save_checkpoint(tmp, ck);
    fs::rename(tmp, path);
  }
  d.suite = make_desk_suite(d.vocab, d.config.corpus, d.corpus,
                            {d.config.eval.words_per_category, d.config.eval.benign_prompts});
  d.matcher = {d.vocab.encode(kRefusalText), d.config.eval.min_match};
  return d;
}

}  // namespace

const Desk& desk() {
  static const Desk d = build_desk();
  return d;
}

}  // namespace tokenedit::testing
