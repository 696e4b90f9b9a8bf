#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

namespace tokenedit {

template <typename S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;
template <typename S>
using Vec = Eigen::Matrix<S, Eigen::Dynamic, 1>;

using MatF = Mat<float>;
using VecF = Vec<float>;
using MatD = Mat<double>;
using VecD = Vec<double>;

using TokenId = std::int32_t;
using TokenSequence = std::vector<TokenId>;

// Error categories double as CLI exit codes.
enum class ErrorCode : int {
  kGeneric = 1,
  kUsage = 2,
  kInvalidConfig = 3,
  kFingerprintMismatch = 4,
  kIo = 5,
  kNumeric = 6,
  kInvalidArgument = 7,
  kNotFound = 8,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(what), code_(code) {}
  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

class InvalidArgument : public Error {
 public:
  explicit InvalidArgument(const std::string& what)
      : Error(ErrorCode::kInvalidArgument, what) {}
};

class NumericError : public Error {
 public:
  explicit NumericError(const std::string& what)
      : Error(ErrorCode::kNumeric, what) {}
};

class FingerprintMismatch : public Error {
 public:
  explicit FingerprintMismatch(const std::string& what)
      : Error(ErrorCode::kFingerprintMismatch, what) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& what) : Error(ErrorCode::kIo, what) {}
};

std::string error_code_name(ErrorCode code);

// Non-fatal diagnostics. The default sink writes one line to stderr.
using WarningSink = std::function<void(const std::string&)>;
void set_warning_sink(WarningSink sink);
void warn(const std::string& message);

}  // namespace tokenedit
