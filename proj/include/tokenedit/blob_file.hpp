#pragma once

#include <json.hpp>

#include <cstddef>
#include <filesystem>
#include <span>
#include <vector>

namespace tokenedit {

// Container shared by checkpoints and moment caches:
//   8-byte magic "TKEDBLOB" | u64 LE manifest length | manifest JSON | raw blob
// Blob payloads are little-endian scalars in manifest order.
struct BlobFile {
  nlohmann::json manifest;
  std::vector<std::byte> blob;
};

void write_blob_file(const std::filesystem::path& path, const nlohmann::json& manifest,
                     std::span<const std::byte> blob);
BlobFile read_blob_file(const std::filesystem::path& path);

// Appends/reads scalars as little-endian bytes regardless of host order.
template <typename S>
void append_le(std::vector<std::byte>& out, std::span<const S> values);
template <typename S>
void read_le(std::span<const std::byte> in, std::span<S> values);

}  // namespace tokenedit
