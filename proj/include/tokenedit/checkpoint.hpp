#pragma once

#include "tokenedit/model.hpp"

#include <json.hpp>

#include <filesystem>

namespace tokenedit {

inline constexpr int kCheckpointFormatVersion = 1;

struct Checkpoint {
  Weights weights;
  // Provenance list of edit batches applied to these weights.
  nlohmann::json edits = nlohmann::json::array();
  // Free-form metadata (training history, config hash, ...).
  nlohmann::json extra = nlohmann::json::object();
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
// Validates format version, tensor directory against the config, and finiteness.
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace tokenedit
