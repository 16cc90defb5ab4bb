#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace patchstorm {

enum class Errc {
  shape_mismatch,
  non_finite,
  invalid_argument,
  out_of_range,
  io,
  bad_magic,
  bad_version,
  truncated,
  divergence,
  unknown_key,
  type_mismatch,
  missing_key,
};

inline std::string_view to_string(Errc code) {
  switch (code) {
    case Errc::shape_mismatch: return "shape_mismatch";
    case Errc::non_finite: return "non_finite";
    case Errc::invalid_argument: return "invalid_argument";
    case Errc::out_of_range: return "out_of_range";
    case Errc::io: return "io";
    case Errc::bad_magic: return "bad_magic";
    case Errc::bad_version: return "bad_version";
    case Errc::truncated: return "truncated";
    case Errc::divergence: return "divergence";
    case Errc::unknown_key: return "unknown_key";
    case Errc::type_mismatch: return "type_mismatch";
    case Errc::missing_key: return "missing_key";
  }
  return "unknown";
}

/// Every failure raised by the library. `code()` is stable and meant for
/// programmatic handling; `what()` carries the human-readable context.
class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& message)
      : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code) {}

  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

}  // namespace patchstorm
