#pragma once

#include "tokenedit/corpus.hpp"
#include "tokenedit/model.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace tokenedit {

enum class PositionSelection { kAll, kCompletionOnly };

PositionSelection parse_position_selection(const std::string& text);
std::string to_string(PositionSelection selection);

// Unnormalized second moment C = sum k k^T of gate activations at one layer.
struct MomentCache {
  int layer = 0;
  MatD second_moment;
  std::uint64_t sample_count = 0;
  std::string corpus_fingerprint;
  std::string weights_fingerprint;
  // Caller metadata stored in the file manifest (e.g. the producing config hash).
  nlohmann::json meta = nlohmann::json::object();

  static MomentCache empty(int layer, int d_mlp, std::string weights_fingerprint);
  // (moment_weight / sample_count) * C; throws when sample_count == 0.
  MatD scaled(double moment_weight) const;
};

MomentCache accumulate_second_moment(const Weights& weights, const std::vector<CorpusRecord>& records,
                                     int layer, PositionSelection positions = PositionSelection::kAll);

// One forward pass per record feeding every requested layer. Records are
// split into `shards` contiguous slices accumulated concurrently and merged
// in shard order.
std::vector<MomentCache> accumulate_layers(const Weights& weights,
                                           const std::vector<CorpusRecord>& records,
                                           const std::vector<int>& layers,
                                           PositionSelection positions = PositionSelection::kAll,
                                           std::size_t shards = 1);

// C and counts add. Throws FingerprintMismatch on a layer or weights mismatch.
MomentCache merge_moments(const MomentCache& a, const MomentCache& b);

// Throws FingerprintMismatch unless the cache was built from these weights.
void require_matching(const MomentCache& cache, const Weights& weights);

// JSON manifest (layer, count, fingerprints, shape) + little-endian float64 blob.
void save_moment_cache(const std::filesystem::path& path, const MomentCache& cache);
MomentCache load_moment_cache(const std::filesystem::path& path);

}  // namespace tokenedit
