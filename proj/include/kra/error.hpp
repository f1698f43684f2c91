#pragma once

#include <stdexcept>
#include <string>

namespace kra {

enum class ErrorCode {
  invalid_argument,
  shape_mismatch,
  domain,
  unknown_tap,
  io,
  version_mismatch,
  checksum_mismatch,
  unknown_architecture,
  divergence,
  division_by_zero,
};

const char* to_string(ErrorCode code) noexcept;

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace kra
