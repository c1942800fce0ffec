#include <cstdlib>
#include <string>

#include "tulip/error.hpp"
#include "tulip/parallel.hpp"

namespace tulip {

std::string_view errc_name(Errc code) noexcept {
  switch (code) {
    case Errc::kInvalidArgument: return "InvalidArgument";
    case Errc::kZeroPoint: return "ZeroPoint";
    case Errc::kOutOfFov: return "OutOfFov";
    case Errc::kIndivisibleHeight: return "IndivisibleHeight";
    case Errc::kShapeMismatch: return "ShapeMismatch";
    case Errc::kNonScalarLoss: return "NonScalarLoss";
    case Errc::kIndivisibleShape: return "IndivisibleShape";
    case Errc::kIndivisibleGrid: return "IndivisibleGrid";
    case Errc::kOddGrid: return "OddGrid";
    case Errc::kIndivisibleChannels: return "IndivisibleChannels";
    case Errc::kEmptyCloud: return "EmptyCloud";
    case Errc::kIoFailure: return "IoFailure";
    case Errc::kFormatError: return "FormatError";
    case Errc::kNumericalFailure: return "NumericalFailure";
  }
  return "Unknown";
}

namespace {
std::atomic<std::size_t> g_thread_count{0};
}

std::size_t default_thread_count() {
  if (const char* env = std::getenv("TULIP_THREADS")) {
    try {
      const long n = std::stol(env);
      if (n > 0) return static_cast<std::size_t>(n);
    } catch (...) {
    }
  }
  return std::max<std::size_t>(1, std::thread::hardware_concurrency());
}

std::size_t thread_count() {
  const std::size_t n = g_thread_count.load();
  return n == 0 ? default_thread_count() : n;
}

void set_thread_count(std::size_t n) { g_thread_count.store(n); }

}  // namespace tulip
