#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>

namespace patchstorm {

/// One splitmix64 output step applied to `x` as the generator state.
constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept {
  std::uint64_t z = x + 0x9E3779B97F4A7C15ULL;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

/// Packs a tag and two indices into one stream id so that independent
/// consumers (attack iteration, crop slot, diagnostic sample...) never collide.
constexpr std::uint64_t stream_id(std::uint64_t tag, std::uint64_t a, std::uint64_t b = 0) noexcept {
  return splitmix64(splitmix64(tag) ^ (a * 0xD1B54A32D192ED03ULL)) ^ (b * 0x9E3779B97F4A7C15ULL);
}

/// splitmix64 generator. The sequence is a pure function of (seed, stream).
class Rng {
 public:
  /// Raw generator: the first output of Rng::raw(0) is 0xE220A8397B1DCDAF.
  static Rng raw(std::uint64_t state) noexcept {
    Rng r;
    r.state_ = state;
    return r;
  }

  explicit Rng(std::uint64_t seed, std::uint64_t stream = 0) noexcept
      : state_(splitmix64(seed ^ stream)), seed_(seed), stream_(stream) {}

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t stream() const noexcept { return stream_; }

  std::uint64_t next_u64() noexcept {
    state_ += 0x9E3779B97F4A7C15ULL;
    std::uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() noexcept { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n). n must be positive.
  std::uint64_t below(std::uint64_t n) noexcept {
    return static_cast<std::uint64_t>(uniform() * static_cast<double>(n)) % n;
  }

  /// Standard normal via Box-Muller; the paired draw is cached.
  double normal() noexcept {
    if (cached_normal_) {
      const double z = *cached_normal_;
      cached_normal_.reset();
      return z;
    }
    const double u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(1.0 - u1));
    const double theta = 2.0 * std::numbers::pi * u2;
    cached_normal_ = r * std::sin(theta);
    return r * std::cos(theta);
  }

  double normal(double mean, double stddev) noexcept { return mean + stddev * normal(); }

  /// Independent substream keyed by `id`, unaffected by draws already taken from this one.
  Rng substream(std::uint64_t id) const noexcept { return Rng(seed_ ^ splitmix64(stream_), id); }

 private:
  Rng() = default;

  std::uint64_t state_ = 0;
  std::uint64_t seed_ = 0;
  std::uint64_t stream_ = 0;
  std::optional<double> cached_normal_;
};

}  // namespace patchstorm
