#include "tokenedit/common.hpp"
#include "tokenedit/fingerprint.hpp"
#include "tokenedit/parallel.hpp"

#include <array>
#include <atomic>
#include <iostream>
#include <mutex>

namespace tokenedit {

namespace {
std::mutex g_warning_mutex;
WarningSink g_warning_sink;
}  // namespace

void set_warning_sink(WarningSink sink) {
  std::lock_guard lock(g_warning_mutex);
  g_warning_sink = std::move(sink);
}

void warn(const std::string& message) {
  std::lock_guard lock(g_warning_mutex);
  if (g_warning_sink) {
    g_warning_sink(message);
  } else {
    std::cerr << "warning: " << message << '\n';
  }
}

std::string error_code_name(ErrorCode code) {
  switch (code) {
    case ErrorCode::kGeneric: return "error";
    case ErrorCode::kUsage: return "usage";
    case ErrorCode::kInvalidConfig: return "invalid_config";
    case ErrorCode::kFingerprintMismatch: return "fingerprint_mismatch";
    case ErrorCode::kIo: return "io";
    case ErrorCode::kNumeric: return "numeric";
    case ErrorCode::kInvalidArgument: return "invalid_argument";
    case ErrorCode::kNotFound: return "not_found";
  }
  return "error";
}

void Fnv1a::update(std::span<const std::byte> bytes) {
  for (std::byte b : bytes) {
    state_ ^= static_cast<std::uint64_t>(b);
    state_ *= 0x100000001b3ULL;
  }
}

void Fnv1a::update(std::string_view text) {
  update(std::as_bytes(std::span<const char>(text.data(), text.size())));
}

std::string Fnv1a::hex() const {
  static constexpr std::array<char, 16> kDigits = {'0', '1', '2', '3', '4', '5', '6', '7',
                                                   '8', '9', 'a', 'b', 'c', 'd', 'e', 'f'};
  std::string out(16, '0');
  std::uint64_t v = state_;
  for (int i = 15; i >= 0; --i) {
    out[static_cast<std::size_t>(i)] = kDigits[v & 0xf];
    v >>= 4;
  }
  return out;
}

std::string fingerprint_text(std::string_view text) {
  Fnv1a h;
  h.update(text);
  return h.hex();
}

namespace {
std::atomic<std::size_t> g_max_threads{1};
}

void set_max_threads(std::size_t n) { g_max_threads = n == 0 ? 1 : n; }
std::size_t max_threads() { return g_max_threads; }

}  // namespace tokenedit
