#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <stdexcept>

namespace flowrl {

// Counter-based generator: every output is a pure function of (key, counter),
// so independent substreams never interact and replays are exact regardless of
// how many draws other components consumed.
class Rng {
 public:
  explicit Rng(std::uint64_t key) : key_(key) {}

  // Child stream whose outputs are independent of this stream's position.
  [[nodiscard]] Rng derive(std::uint64_t tag) const {
    return Rng(mix(key_ ^ mix(tag + kGolden)));
  }

  std::uint64_t next_u64() { return mix(key_ + (++counter_) * kGolden); }

  // Uniform on (0,1]; never 0, so log(u) is finite.
  double uniform() {
    return static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53;
  }

  // Box-Muller, cosine branch. Consumes exactly two uniforms per call and
  // caches nothing, so the stream position is a simple function of call count.
  double normal() {
    const double u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) *
           std::cos(2.0 * std::numbers::pi * u2);
  }

  // Uniform integer in [0, bound) via Lemire's multiply-shift rejection.
  std::uint64_t below(std::uint64_t bound) {
    if (bound == 0) throw std::invalid_argument("Rng::below: bound must be positive");
    while (true) {
      const std::uint64_t x = next_u64();
      const unsigned __int128 m = static_cast<unsigned __int128>(x) * bound;
      const std::uint64_t lo = static_cast<std::uint64_t>(m);
      if (lo >= bound || lo >= (-bound) % bound)
        return static_cast<std::uint64_t>(m >> 64);
    }
  }

 private:
  static constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ull;

  // SplitMix64 finalizer.
  static constexpr std::uint64_t mix(std::uint64_t z) {
    z ^= z >> 30;
    z *= 0xBF58476D1CE4E5B9ull;
    z ^= z >> 27;
    z *= 0x94D049BB133111EBull;
    z ^= z >> 31;
    return z;
  }

  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

// Stream tags used by the trainer and harness. Keeping them in one place
// documents the full randomness budget of a run.
namespace stream {
inline constexpr std::uint64_t kInit = 1;      // weight initialization
inline constexpr std::uint64_t kData = 2;      // pretraining data batches
inline constexpr std::uint64_t kPrompt = 3;    // per-epoch shared x1
inline constexpr std::uint64_t kNoise = 4;     // per-step baseline noise
inline constexpr std::uint64_t kSearch = 5;    // per-step noise search
inline constexpr std::uint64_t kMask = 6;      // timestep-fraction inclusion
inline constexpr std::uint64_t kEval = 7;      // evaluation batches
inline constexpr std::uint64_t kStudy = 8;     // decode study candidates
}  // namespace stream

}  // namespace flowrl
