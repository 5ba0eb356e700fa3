#pragma once

// Counter-based randomness. Every draw is keyed by an explicit tuple of
// integers (seed, stream tag, indices...), so results never depend on call
// order or on which thread evaluates them.

#include <cmath>
#include <cstdint>
#include <initializer_list>

namespace metta {

inline constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

/// Order-sensitive hash of an index tuple.
inline constexpr std::uint64_t mix_key(std::initializer_list<std::uint64_t> parts) noexcept {
  std::uint64_t h = 0x6A09E667F3BCC909ull;
  for (std::uint64_t p : parts) h = splitmix64(h ^ splitmix64(p + 0x243F6A8885A308D3ull));
  return h;
}

// Stream tags keep independent uses of the same seed apart.
enum class Stream : std::uint64_t {
  kDataset = 1,
  kAugment = 2,
  kInit = 3,
  kShuffle = 4,
  kTrial = 5,
};

/// Small deterministic generator seeded from a mixed key (splitmix64 stream).
class CounterRng {
 public:
  explicit CounterRng(std::uint64_t key) noexcept : state_(key) {}
  CounterRng(std::initializer_list<std::uint64_t> parts) noexcept : state_(mix_key(parts)) {}

  std::uint64_t next_u64() noexcept {
    state_ += 0x9E3779B97F4A7C15ull;
    std::uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

  // [0, 1) with 53 random bits.
  double uniform() noexcept { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }

  // Integer in [0, n); n > 0. Multiply-shift keeps the result platform independent.
  std::uint64_t below(std::uint64_t n) noexcept {
    __extension__ using wide = unsigned __int128;
    return static_cast<std::uint64_t>((static_cast<wide>(next_u64()) * n) >> 64);
  }

  bool coin() noexcept { return (next_u64() >> 63) != 0; }

  // Standard normal via Box-Muller (one value per call).
  double normal() noexcept {
    const double u1 = 1.0 - uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

 private:
  std::uint64_t state_;
};

}  // namespace metta
