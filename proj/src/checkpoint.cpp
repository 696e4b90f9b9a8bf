#include "tokenedit/checkpoint.hpp"

#include "tokenedit/blob_file.hpp"

#include <cmath>

namespace tokenedit {

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint) {
  const Weights& w = checkpoint.weights;
  nlohmann::json tensors = nlohmann::json::array();
  std::vector<std::byte> blob;
  for (const auto& t : w.tensors()) {
    const std::size_t offset = blob.size();
    append_le<float>(blob, std::span<const float>(t.data, static_cast<std::size_t>(t.size())));
    nlohmann::json shape = t.is_vector ? nlohmann::json::array({t.rows})
                                       : nlohmann::json::array({t.rows, t.cols});
    tensors.push_back({{"name", t.name},
                       {"shape", shape},
                       {"offset", offset},
                       {"byte_length", blob.size() - offset}});
  }
  nlohmann::json manifest = {{"format", "tokenedit-checkpoint"},
                             {"format_version", kCheckpointFormatVersion},
                             {"config", w.config},
                             {"seed", w.config.seed},
                             {"dtype", "float32-le"},
                             {"tensors", tensors},
                             {"fingerprint", w.fingerprint()},
                             {"edits", checkpoint.edits},
                             {"extra", checkpoint.extra}};
  write_blob_file(path, manifest, blob);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  const BlobFile file = read_blob_file(path);
  const nlohmann::json& m = file.manifest;
  if (m.value("format", "") != "tokenedit-checkpoint") {
    throw IoError(path.string() + ": not a checkpoint");
  }
  if (m.value("format_version", 0) != kCheckpointFormatVersion) {
    throw IoError(path.string() + ": unsupported format_version");
  }
  Checkpoint ckpt;
  ModelConfig config = m.at("config").get<ModelConfig>();
  config.validate();
  ckpt.weights = Weights::zeros(config);
  auto refs = ckpt.weights.tensors();
  const auto& dir = m.at("tensors");
  if (dir.size() != refs.size()) throw IoError(path.string() + ": tensor count mismatch");
  for (std::size_t i = 0; i < refs.size(); ++i) {
    const auto& entry = dir[i];
    auto& ref = refs[i];
    if (entry.at("name").get<std::string>() != ref.name) {
      throw IoError(path.string() + ": expected tensor " + ref.name);
    }
    const auto shape = entry.at("shape").get<std::vector<long>>();
    const bool ok = ref.is_vector ? (shape.size() == 1 && shape[0] == ref.rows)
                                  : (shape.size() == 2 && shape[0] == ref.rows && shape[1] == ref.cols);
    if (!ok) throw IoError(path.string() + ": shape mismatch for " + ref.name);
    const auto offset = entry.at("offset").get<std::size_t>();
    const auto length = entry.at("byte_length").get<std::size_t>();
    if (length != static_cast<std::size_t>(ref.size()) * sizeof(float) ||
        offset + length > file.blob.size()) {
      throw IoError(path.string() + ": bad extent for " + ref.name);
    }
    read_le<float>(std::span<const std::byte>(file.blob.data() + offset, length),
                   std::span<float>(ref.data, static_cast<std::size_t>(ref.size())));
  }
  if (!ckpt.weights.all_finite()) throw IoError(path.string() + ": non-finite parameter values");
  ckpt.edits = m.value("edits", nlohmann::json::array());
  ckpt.extra = m.value("extra", nlohmann::json::object());
  return ckpt;
}

}  // namespace tokenedit
