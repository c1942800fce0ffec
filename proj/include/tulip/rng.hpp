#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string_view>

namespace tulip {

// Counter-based generator: every draw is a pure function of
// (seed, purpose, step, counter), so streams can be split across threads and
// replayed without carrying mutable state between them.
namespace rng_purpose {
inline constexpr std::uint64_t kDropout = 0x64726f70;
inline constexpr std::uint64_t kInit = 0x696e6974;
inline constexpr std::uint64_t kShuffle = 0x73687566;
inline constexpr std::uint64_t kScene = 0x7363656e;
inline constexpr std::uint64_t kMonteCarlo = 0x6d63646f;
inline constexpr std::uint64_t kTest = 0x74657374;
}  // namespace rng_purpose

constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

constexpr std::uint64_t hash_combine(std::uint64_t a, std::uint64_t b) noexcept {
  return mix64(a ^ (mix64(b) + 0x9e3779b97f4a7c15ULL + (a << 6) + (a >> 2)));
}

constexpr std::uint64_t fnv1a(std::string_view text) noexcept {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : text) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

class CounterRng {
 public:
  CounterRng(std::uint64_t seed, std::uint64_t purpose, std::uint64_t step = 0) noexcept
      : key_(hash_combine(hash_combine(mix64(seed), purpose), step)) {}

  std::uint64_t bits_at(std::uint64_t counter) const noexcept {
    return mix64(key_ ^ mix64(counter));
  }

  // Single-round variant (splitmix64 sequence) for bulk draws.
  std::uint64_t fast_bits_at(std::uint64_t counter) const noexcept {
    return mix64(key_ + counter * 0x9e3779b97f4a7c15ULL);
  }

  // Uniform in [0, 1) with 53 bits of resolution.
  double uniform_at(std::uint64_t counter) const noexcept {
    return static_cast<double>(bits_at(counter) >> 11) * 0x1.0p-53;
  }

  std::uint64_t next_bits() noexcept { return bits_at(counter_++); }
  double uniform() noexcept { return uniform_at(counter_++); }
  double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }

  // Inclusive range [lo, hi].
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) noexcept {
    const auto span = static_cast<std::uint64_t>(hi - lo) + 1;
    if (span == 0) return static_cast<std::int64_t>(next_bits());
    const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % span);
    std::uint64_t x = next_bits();
    while (x >= limit) x = next_bits();
    return lo + static_cast<std::int64_t>(x % span);
  }

  // Box-Muller; consumes two draws per sample so the stream position stays
  // a simple function of the sample count.
  double normal() noexcept {
    double u1 = uniform();
    const double u2 = uniform();
    if (u1 <= 0.0) u1 = 0x1.0p-53;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  std::uint64_t counter() const noexcept { return counter_; }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

}  // namespace tulip
