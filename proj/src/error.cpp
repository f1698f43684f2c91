#include "kra/error.hpp"

namespace kra {

const char* to_string(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::invalid_argument: return "invalid argument";
    case ErrorCode::shape_mismatch: return "shape mismatch";
    case ErrorCode::domain: return "domain error";
    case ErrorCode::unknown_tap: return "unknown tap";
    case ErrorCode::io: return "i/o error";
    case ErrorCode::version_mismatch: return "version mismatch";
    case ErrorCode::checksum_mismatch: return "checksum mismatch";
    case ErrorCode::unknown_architecture: return "unknown architecture";
    case ErrorCode::divergence: return "divergence";
    case ErrorCode::division_by_zero: return "division by zero";
  }
  return "unknown error";
}

}  // namespace kra
