#include "tokenedit/blob_file.hpp"

#include "tokenedit/common.hpp"

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>

namespace tokenedit {

namespace {

constexpr char kMagic[8] = {'T', 'K', 'E', 'D', 'B', 'L', 'O', 'B'};

template <typename T>
std::array<std::byte, sizeof(T)> to_le_bytes(T value) {
  std::array<std::byte, sizeof(T)> bytes;
  std::memcpy(bytes.data(), &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
  return bytes;
}

template <typename T>
T from_le_bytes(const std::byte* in) {
  std::array<std::byte, sizeof(T)> bytes;
  std::memcpy(bytes.data(), in, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
  T value;
  std::memcpy(&value, bytes.data(), sizeof(T));
  return value;
}

}  // namespace

template <typename S>
void append_le(std::vector<std::byte>& out, std::span<const S> values) {
  out.reserve(out.size() + values.size_bytes());
  for (S v : values) {
    const auto b = to_le_bytes(v);
    out.insert(out.end(), b.begin(), b.end());
  }
}

template <typename S>
void read_le(std::span<const std::byte> in, std::span<S> values) {
  if (in.size() != values.size_bytes()) throw IoError("blob segment size mismatch");
  for (std::size_t i = 0; i < values.size(); ++i) {
    values[i] = from_le_bytes<S>(in.data() + i * sizeof(S));
  }
}

template void append_le<float>(std::vector<std::byte>&, std::span<const float>);
template void append_le<double>(std::vector<std::byte>&, std::span<const double>);
template void read_le<float>(std::span<const std::byte>, std::span<float>);
template void read_le<double>(std::span<const std::byte>, std::span<double>);

void write_blob_file(const std::filesystem::path& path, const nlohmann::json& manifest,
                     std::span<const std::byte> blob) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  const std::string text = manifest.dump();
  out.write(kMagic, sizeof(kMagic));
  const auto len = to_le_bytes<std::uint64_t>(text.size());
  out.write(reinterpret_cast<const char*>(len.data()), len.size());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  out.write(reinterpret_cast<const char*>(blob.data()), static_cast<std::streamsize>(blob.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

BlobFile read_blob_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<char> raw((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (raw.size() < 16 || std::memcmp(raw.data(), kMagic, sizeof(kMagic)) != 0) {
    throw IoError(path.string() + " is not a tokenedit blob file");
  }
  const auto len = from_le_bytes<std::uint64_t>(reinterpret_cast<const std::byte*>(raw.data() + 8));
  if (len > raw.size() - 16) throw IoError(path.string() + ": truncated manifest");
  BlobFile file;
  try {
    file.manifest = nlohmann::json::parse(raw.begin() + 16, raw.begin() + 16 + static_cast<long>(len));
  } catch (const nlohmann::json::exception& e) {
    throw IoError(path.string() + ": malformed manifest: " + e.what());
  }
  const auto* blob_begin = reinterpret_cast<const std::byte*>(raw.data() + 16 + len);
  file.blob.assign(blob_begin, reinterpret_cast<const std::byte*>(raw.data() + raw.size()));
  return file;
}

}  // namespace tokenedit
