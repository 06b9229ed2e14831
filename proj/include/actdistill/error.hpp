#pragma once

#include <stdexcept>
#include <string>

namespace actdistill {

/// Base of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Shape or precondition violation at an API boundary.
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration value or unknown key.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// NaN/Inf produced or consumed, divergence, overflow guard tripped.
class NumericalError : public Error {
 public:
  using Error::Error;
};

enum class IntegrityCode {
  kBadMagic,
  kVersionMismatch,
  kTruncated,
  kChecksumMismatch,
  kMalformed,
  kHashMismatch,
  kFrozenViolation,
};

const char* to_string(IntegrityCode code) noexcept;

/// Corrupt or inconsistent persisted artifact, or a frozen model that changed.
class IntegrityError : public Error {
 public:
  IntegrityError(IntegrityCode code, const std::string& what)
      : Error(std::string(to_string(code)) + ": " + what), code_(code) {}

  IntegrityCode code() const noexcept { return code_; }

 private:
  IntegrityCode code_;
};

inline const char* to_string(IntegrityCode code) noexcept {
  switch (code) {
    case IntegrityCode::kBadMagic: return "bad_magic";
    case IntegrityCode::kVersionMismatch: return "version_mismatch";
    case IntegrityCode::kTruncated: return "truncated";
    case IntegrityCode::kChecksumMismatch: return "checksum_mismatch";
    case IntegrityCode::kMalformed: return "malformed";
    case IntegrityCode::kHashMismatch: return "hash_mismatch";
    case IntegrityCode::kFrozenViolation: return "frozen_violation";
  }
  return "unknown";
}

}  // namespace actdistill
