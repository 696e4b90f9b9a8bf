#include "tokenedit/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <random>

namespace tokenedit {

namespace {

// Completion-token NLL summed over the record; fills dlogits when given.
template <typename S>
double record_nll(const Mat<S>& logits, const CorpusRecord& r, Mat<S>* dlogits, S grad_scale) {
  const TokenSequence seq = r.full();
  double total = 0.0;
  const std::size_t first = r.prompt.size() - 1;
  for (std::size_t pos = first; pos + 1 < seq.size(); ++pos) {
    const Vec<S> row = logits.row(static_cast<Eigen::Index>(pos)).transpose();
    const Vec<S> logp = log_softmax<S>(row);
    const TokenId target = seq[pos + 1];
    total -= static_cast<double>(logp(target));
    if (dlogits != nullptr) {
      Vec<S> g = logp.array().exp().matrix();
      g(target) -= S(1);
      dlogits->row(static_cast<Eigen::Index>(pos)) += grad_scale * g.transpose();
    }
  }
  return total;
}

std::size_t completion_tokens(const CorpusRecord& r) { return r.completion.size(); }

}  // namespace

void to_json(nlohmann::json& j, const TrainOptions& o) {
  j = {{"epochs", o.epochs},       {"lr", o.lr},
       {"min_lr_fraction", o.min_lr_fraction},
       {"batch_size", o.batch_size}, {"beta1", o.beta1},
       {"beta2", o.beta2},         {"eps", o.eps},
       {"grad_clip", o.grad_clip}, {"seed", o.seed}};
}

void from_json(const nlohmann::json& j, TrainOptions& o) {
  TrainOptions d;
  o.epochs = j.value("epochs", d.epochs);
  o.lr = j.value("lr", d.lr);
  o.min_lr_fraction = j.value("min_lr_fraction", d.min_lr_fraction);
  o.batch_size = j.value("batch_size", d.batch_size);
  o.beta1 = j.value("beta1", d.beta1);
  o.beta2 = j.value("beta2", d.beta2);
  o.eps = j.value("eps", d.eps);
  o.grad_clip = j.value("grad_clip", d.grad_clip);
  o.seed = j.value("seed", d.seed);
}

TrainResult train_lm(const ModelConfig& config, const Corpus& corpus, const TrainOptions& options) {
  return train_lm(Weights::initialize(config), corpus, options);
}

TrainResult train_lm(Weights weights, const Corpus& corpus, const TrainOptions& options) {
  if (corpus.records.empty()) throw InvalidArgument("training corpus is empty");
  if (options.epochs < 0 || options.batch_size < 1 || options.lr <= 0 || options.min_lr_fraction < 0 ||
      options.min_lr_fraction > 1) {
    throw InvalidArgument("invalid training options");
  }
  for (const auto& r : corpus.records) check_tokens(weights.config, r.full());

  TrainResult result;
  Weights grads = Weights::zeros(weights.config);
  Weights m1 = Weights::zeros(weights.config);
  Weights m2 = Weights::zeros(weights.config);
  auto params = weights.tensors();
  auto g_refs = grads.tensors();
  auto m1_refs = m1.tensors();
  auto m2_refs = m2.tensors();

  std::mt19937_64 rng(options.seed);
  std::vector<std::size_t> order(corpus.records.size());
  std::iota(order.begin(), order.end(), 0);
  long step = 0;
  const std::size_t batches_per_epoch =
      (order.size() + static_cast<std::size_t>(options.batch_size) - 1) / static_cast<std::size_t>(options.batch_size);
  const double total_steps = static_cast<double>(batches_per_epoch) * options.epochs;

  for (int epoch = 0; epoch < options.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_nll = 0.0;
    std::size_t epoch_tokens = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(options.batch_size)) {
      const std::size_t stop = std::min(order.size(), start + static_cast<std::size_t>(options.batch_size));
      std::size_t batch_tokens = 0;
      for (std::size_t i = start; i < stop; ++i) batch_tokens += completion_tokens(corpus.records[order[i]]);
      for (auto& g : g_refs) std::fill(g.data, g.data + g.size(), 0.0f);
      const float scale = 1.0f / static_cast<float>(batch_tokens);
      double batch_nll = 0.0;
      for (std::size_t i = start; i < stop; ++i) {
        const CorpusRecord& r = corpus.records[order[i]];
        const ForwardResult<float> fr = forward(weights, r.full());
        Mat<float> dlogits = Mat<float>::Zero(fr.logits.rows(), fr.logits.cols());
        batch_nll += record_nll(fr.logits, r, &dlogits, scale);
        backward<float>(weights, fr.trace, dlogits, -1, &grads);
      }
      ++step;
      if (!std::isfinite(batch_nll)) {
        throw NumericError("training diverged at step " + std::to_string(step) + " (epoch " +
                           std::to_string(epoch) + ")");
      }
      epoch_nll += batch_nll;
      epoch_tokens += batch_tokens;

      double norm_sq = 0.0;
      for (const auto& g : g_refs) {
        for (Eigen::Index k = 0; k < g.size(); ++k) norm_sq += static_cast<double>(g.data[k]) * g.data[k];
      }
      if (!std::isfinite(norm_sq)) {
        throw NumericError("non-finite gradient at step " + std::to_string(step));
      }
      const double clip = (options.grad_clip > 0 && std::sqrt(norm_sq) > options.grad_clip)
                              ? options.grad_clip / std::sqrt(norm_sq)
                              : 1.0;
      const double bc1 = 1.0 - std::pow(options.beta1, static_cast<double>(step));
      const double bc2 = 1.0 - std::pow(options.beta2, static_cast<double>(step));
      const double progress = static_cast<double>(step - 1) / std::max(1.0, total_steps - 1);
      const double lr = options.lr * (options.min_lr_fraction +
                                      (1 - options.min_lr_fraction) * 0.5 * (1 + std::cos(std::numbers::pi * progress)));
      for (std::size_t t = 0; t < params.size(); ++t) {
        for (Eigen::Index k = 0; k < params[t].size(); ++k) {
          const double g = g_refs[t].data[k] * clip;
          const double a = options.beta1 * m1_refs[t].data[k] + (1 - options.beta1) * g;
          const double b = options.beta2 * m2_refs[t].data[k] + (1 - options.beta2) * g * g;
          m1_refs[t].data[k] = static_cast<float>(a);
          m2_refs[t].data[k] = static_cast<float>(b);
          params[t].data[k] -= static_cast<float>(lr * (a / bc1) / (std::sqrt(b / bc2) + options.eps));
        }
      }
    }
    result.epoch_losses.push_back(epoch_nll / static_cast<double>(epoch_tokens));
  }
  if (!weights.all_finite()) throw NumericError("training produced non-finite weights");
  result.weights = std::move(weights);
  return result;
}

double mean_completion_nll(const Weights& weights, const std::vector<CorpusRecord>& records) {
  if (records.empty()) throw InvalidArgument("perplexity needs a nonempty record set");
  double total = 0.0;
  std::size_t tokens = 0;
  for (const auto& r : records) {
    const Mat<float> logits = forward(weights, r.full()).logits;
    total += record_nll<float>(logits, r, nullptr, 0.0f);
    tokens += completion_tokens(r);
  }
  return total / static_cast<double>(tokens);
}

double perplexity(const Weights& weights, const std::vector<CorpusRecord>& records) {
  return std::exp(mean_completion_nll(weights, records));
}

double perplexity(const Weights& weights, const Corpus& corpus) {
  return perplexity(weights, corpus.records);
}

double compliance_rate(const Weights& weights, const Corpus& corpus, int prefix_len) {
  const auto harmful = corpus.harmful();
  if (harmful.empty()) throw InvalidArgument("corpus has no harmful records");
  int hits = 0;
  for (const auto& r : harmful) {
    const int n = std::min<int>(prefix_len, static_cast<int>(r.completion.size()));
    const TokenSequence out = greedy_decode(weights, r.prompt, n);
    if (std::equal(r.completion.begin(), r.completion.begin() + n, out.begin() + static_cast<long>(r.prompt.size()))) {
      ++hits;
    }
  }
  return static_cast<double>(hits) / static_cast<double>(harmful.size());
}

}  // namespace tokenedit
