#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace mcs_calib {

enum class ErrorCode {
  kOutOfRange,
  kEmptyStream,
  kDegenerateParams,
  kParseError,
  kNonMonotonicTimestamps,
  kUnknownFrame,
  kSensorOutsideMcsSpan,
  kIoError,
  kConfigError,
  kMissingPose,
  kEmptyInput,
  kAllBehindCamera,
  kRankDeficient,
  kDiverged,
  kNoMeasurements,
};

inline std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::kOutOfRange: return "OutOfRange";
    case ErrorCode::kEmptyStream: return "EmptyStream";
    case ErrorCode::kDegenerateParams: return "DegenerateParams";
    case ErrorCode::kParseError: return "ParseError";
    case ErrorCode::kNonMonotonicTimestamps: return "NonMonotonicTimestamps";
    case ErrorCode::kUnknownFrame: return "UnknownFrame";
    case ErrorCode::kSensorOutsideMcsSpan: return "SensorOutsideMcsSpan";
    case ErrorCode::kIoError: return "IoError";
    case ErrorCode::kConfigError: return "ConfigError";
    case ErrorCode::kMissingPose: return "MissingPose";
    case ErrorCode::kEmptyInput: return "EmptyInput";
    case ErrorCode::kAllBehindCamera: return "AllBehindCamera";
    case ErrorCode::kRankDeficient: return "RankDeficient";
    case ErrorCode::kDiverged: return "Diverged";
    case ErrorCode::kNoMeasurements: return "NoMeasurements";
  }
  return "Unknown";
}

/// Every failure raised by the library carries one of the codes above so
/// callers (the CLI in particular) can map it to an exit status.
class CalibError : public std::runtime_error {
 public:
  CalibError(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace mcs_calib
