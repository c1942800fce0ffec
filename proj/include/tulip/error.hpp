#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace tulip {

enum class Errc {
  kInvalidArgument,
  kZeroPoint,
  kOutOfFov,
  kIndivisibleHeight,
  kShapeMismatch,
  kNonScalarLoss,
  kIndivisibleShape,
  kIndivisibleGrid,
  kOddGrid,
  kIndivisibleChannels,
  kEmptyCloud,
  kIoFailure,
  kFormatError,
  kNumericalFailure,
};

std::string_view errc_name(Errc code) noexcept;

class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& message)
      : std::runtime_error(std::string(errc_name(code)) + ": " + message),
        code_(code) {}

  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

[[noreturn]] inline void fail(Errc code, const std::string& message) {
  throw Error(code, message);
}

inline void require(bool condition, Errc code, const std::string& message) {
  if (!condition) throw Error(code, message);
}

}  // namespace tulip
