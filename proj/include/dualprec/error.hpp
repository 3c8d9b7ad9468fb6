#pragma once

#include <stdexcept>
#include <string>

namespace dualprec {

enum class ErrorCode {
  InvalidArgument,
  ShapeMismatch,
  NumericOverflow,
  BadMagic,
  UnsupportedVersion,
  TruncatedStream,
  IndexOutOfRange,
  IncompatibleBitplane,
  MissingUpscaleSection,
  UnsupportedLayer,
  Io,
  Config,
};

inline const char* to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::InvalidArgument: return "invalid argument";
    case ErrorCode::ShapeMismatch: return "shape mismatch";
    case ErrorCode::NumericOverflow: return "numeric overflow";
    case ErrorCode::BadMagic: return "bad magic";
    case ErrorCode::UnsupportedVersion: return "unsupported version";
    case ErrorCode::TruncatedStream: return "truncated stream";
    case ErrorCode::IndexOutOfRange: return "index out of range";
    case ErrorCode::IncompatibleBitplane: return "incompatible bit-plane";
    case ErrorCode::MissingUpscaleSection: return "missing up-scale section";
    case ErrorCode::UnsupportedLayer: return "unsupported layer kind";
    case ErrorCode::Io: return "i/o error";
    case ErrorCode::Config: return "config error";
  }
  return "unknown error";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace dualprec
