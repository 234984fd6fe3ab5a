#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace graftnet {

enum class ErrorCode {
  kShapeMismatch,
  kInvalidArgument,
  kNonFinite,
  kOutOfRange,
  kState,
  kBadMagic,
  kBadVersion,
  kCrcMismatch,
  kIo,
  kFingerprintMismatch,
  kDuplicateAttribute,
  kUnknownAttribute,
  kUnknownClassIndex,
  kDuplicatePath,
  kMissingFile,
  kUnsupportedFormat,
  kDecode,
};

inline std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::kShapeMismatch: return "shape_mismatch";
    case ErrorCode::kInvalidArgument: return "invalid_argument";
    case ErrorCode::kNonFinite: return "non_finite";
    case ErrorCode::kOutOfRange: return "out_of_range";
    case ErrorCode::kState: return "bad_state";
    case ErrorCode::kBadMagic: return "bad_magic";
    case ErrorCode::kBadVersion: return "bad_version";
    case ErrorCode::kCrcMismatch: return "crc_mismatch";
    case ErrorCode::kIo: return "io_error";
    case ErrorCode::kFingerprintMismatch: return "fingerprint_mismatch";
    case ErrorCode::kDuplicateAttribute: return "duplicate_attribute";
    case ErrorCode::kUnknownAttribute: return "unknown_attribute";
    case ErrorCode::kUnknownClassIndex: return "unknown_class_index";
    case ErrorCode::kDuplicatePath: return "duplicate_path";
    case ErrorCode::kMissingFile: return "missing_file";
    case ErrorCode::kUnsupportedFormat: return "unsupported_format";
    case ErrorCode::kDecode: return "decode_error";
  }
  return "unknown";
}

/// Every failure raised by the library carries a machine-readable code so
/// callers (the CLI, the wire protocol) can map it without parsing text.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace graftnet
