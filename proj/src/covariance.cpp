#include "tokenedit/covariance.hpp"

#include "tokenedit/blob_file.hpp"
#include "tokenedit/fingerprint.hpp"
#include "tokenedit/parallel.hpp"

namespace tokenedit {

namespace {

std::string records_fingerprint(const std::vector<CorpusRecord>& records, PositionSelection sel) {
  Corpus c{records};
  return fingerprint_text(c.fingerprint() + ":" + to_string(sel));
}

void accumulate_record(const Weights& weights, const CorpusRecord& r, const std::vector<int>& layers,
                       PositionSelection sel, std::vector<MomentCache>& out) {
  const ForwardResult<float> fr = forward(weights, r.full());
  const Eigen::Index T = static_cast<Eigen::Index>(r.prompt.size() + r.completion.size());
  const Eigen::Index first = sel == PositionSelection::kAll ? 0 : static_cast<Eigen::Index>(r.prompt.size());
  if (first >= T) return;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const MatD keys = fr.trace.layers[static_cast<std::size_t>(layers[i])]
                          .gate.middleCols(first, T - first)
                          .template cast<double>();
    out[i].second_moment.noalias() += keys * keys.transpose();
    out[i].sample_count += static_cast<std::uint64_t>(T - first);
  }
}

}  // namespace

PositionSelection parse_position_selection(const std::string& text) {
  if (text == "all") return PositionSelection::kAll;
  if (text == "completion-only" || text == "completion_only") return PositionSelection::kCompletionOnly;
  throw InvalidArgument("unknown position selection: " + text);
}

std::string to_string(PositionSelection selection) {
  return selection == PositionSelection::kAll ? "all" : "completion-only";
}

MomentCache MomentCache::empty(int layer, int d_mlp, std::string weights_fingerprint) {
  MomentCache c;
  c.layer = layer;
  c.second_moment = MatD::Zero(d_mlp, d_mlp);
  c.weights_fingerprint = std::move(weights_fingerprint);
  return c;
}

MatD MomentCache::scaled(double moment_weight) const {
  if (sample_count == 0) {
    throw InvalidArgument("moment cache for layer " + std::to_string(layer) + " has no samples");
  }
  return (moment_weight / static_cast<double>(sample_count)) * second_moment;
}

std::vector<MomentCache> accumulate_layers(const Weights& weights,
                                           const std::vector<CorpusRecord>& records,
                                           const std::vector<int>& layers, PositionSelection positions,
                                           std::size_t shards) {
  if (records.empty()) throw InvalidArgument("moment accumulation needs a nonempty corpus");
  for (int l : layers) {
    if (l < 0 || l >= weights.config.n_layers) throw InvalidArgument("layer out of range: " + std::to_string(l));
  }
  const std::string wfp = weights.fingerprint();
  shards = std::clamp<std::size_t>(shards, 1, records.size());
  std::vector<std::vector<MomentCache>> partial(shards);
  parallel_for(shards, [&](std::size_t s) {
    auto& mine = partial[s];
    for (int l : layers) mine.push_back(MomentCache::empty(l, weights.config.d_mlp, wfp));
    const std::size_t begin = records.size() * s / shards;
    const std::size_t end = records.size() * (s + 1) / shards;
    for (std::size_t i = begin; i < end; ++i) accumulate_record(weights, records[i], layers, positions, mine);
  });
  std::vector<MomentCache> merged = partial[0];
  for (std::size_t s = 1; s < shards; ++s) {
    for (std::size_t i = 0; i < layers.size(); ++i) merged[i] = merge_moments(merged[i], partial[s][i]);
  }
  const std::string cfp = records_fingerprint(records, positions);
  for (auto& c : merged) {
    if (c.sample_count == 0) throw InvalidArgument("position selection matched no tokens");
    c.corpus_fingerprint = cfp;
  }
  return merged;
}

MomentCache accumulate_second_moment(const Weights& weights, const std::vector<CorpusRecord>& records,
                                     int layer, PositionSelection positions) {
  return accumulate_layers(weights, records, {layer}, positions, 1).front();
}

MomentCache merge_moments(const MomentCache& a, const MomentCache& b) {
  if (a.layer != b.layer) {
    throw FingerprintMismatch("cannot merge caches of layers " + std::to_string(a.layer) + " and " +
                              std::to_string(b.layer));
  }
  if (a.weights_fingerprint != b.weights_fingerprint) {
    throw FingerprintMismatch("cannot merge caches built from different weights");
  }
  if (a.second_moment.rows() != b.second_moment.rows()) {
    throw InvalidArgument("moment cache shapes differ");
  }
  MomentCache out = a;
  out.second_moment = a.second_moment + b.second_moment;
  out.sample_count = a.sample_count + b.sample_count;
  if (a.sample_count == 0) {
    out.corpus_fingerprint = b.corpus_fingerprint;
  } else if (b.sample_count != 0 && a.corpus_fingerprint != b.corpus_fingerprint) {
    out.corpus_fingerprint = fingerprint_text(a.corpus_fingerprint + "+" + b.corpus_fingerprint);
  }
  return out;
}

void require_matching(const MomentCache& cache, const Weights& weights) {
  if (cache.weights_fingerprint != weights.fingerprint()) {
    throw FingerprintMismatch("moment cache for layer " + std::to_string(cache.layer) +
                              " was built from different weights");
  }
  if (cache.second_moment.rows() != weights.config.d_mlp) {
    throw FingerprintMismatch("moment cache shape does not match d_mlp");
  }
}

void save_moment_cache(const std::filesystem::path& path, const MomentCache& cache) {
  std::vector<std::byte> blob;
  append_le<double>(blob, std::span<const double>(cache.second_moment.data(),
                                                  static_cast<std::size_t>(cache.second_moment.size())));
  const nlohmann::json manifest = {{"format", "tokenedit-moment-cache"},
                                   {"format_version", 1},
                                   {"layer", cache.layer},
                                   {"count", cache.sample_count},
                                   {"corpus_fingerprint", cache.corpus_fingerprint},
                                   {"weights_fingerprint", cache.weights_fingerprint},
                                   {"shape", {cache.second_moment.rows(), cache.second_moment.cols()}},
                                   {"dtype", "float64-le"},
                                   {"meta", cache.meta}};
  write_blob_file(path, manifest, blob);
}

MomentCache load_moment_cache(const std::filesystem::path& path) {
  const BlobFile file = read_blob_file(path);
  const auto& m = file.manifest;
  if (m.value("format", "") != "tokenedit-moment-cache") throw IoError(path.string() + ": not a moment cache");
  MomentCache c;
  c.layer = m.at("layer").get<int>();
  c.sample_count = m.at("count").get<std::uint64_t>();
  c.corpus_fingerprint = m.at("corpus_fingerprint").get<std::string>();
  c.weights_fingerprint = m.at("weights_fingerprint").get<std::string>();
  c.meta = m.value("meta", nlohmann::json::object());
  const auto shape = m.at("shape").get<std::array<long, 2>>();
  if (shape[0] != shape[1] || shape[0] <= 0) throw IoError(path.string() + ": bad shape");
  c.second_moment.resize(shape[0], shape[1]);
  read_le<double>(file.blob, std::span<double>(c.second_moment.data(), static_cast<std::size_t>(c.second_moment.size())));
  if (!c.second_moment.allFinite()) throw IoError(path.string() + ": non-finite entries");
  return c;
}

}  // namespace tokenedit
