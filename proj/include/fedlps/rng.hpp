#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numbers>

namespace fedlps {

// Counter-derived RNG streams. One master seed fans out into independent
// streams keyed by (purpose, a, b); adding parallelism or consuming one stream
// more or less never perturbs any other stream, which is what makes runs
// schedule-independent.

inline constexpr uint64_t kGolden = 0x9e3779b97f4a7c15ull;

constexpr uint64_t mix64(uint64_t z) {
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

enum class StreamKind : uint64_t {
  param_init = 1,
  client_select = 2,
  batch = 3,
  bandit_init = 4,
  bandit_sample = 5,
  pattern_random = 6,
  capability = 7,
  partition = 8,
  synth = 9,
  cap_jitter = 10,
};

// SplitMix64.
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed) {}

  uint64_t next_u64() {
    state_ += kGolden;
    return mix64(state_);
  }

  // [0, 1), 53-bit resolution.
  double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

  // Lemire multiply-shift; bias is negligible for simulation use.
  uint64_t next_below(uint64_t n) {
    return static_cast<uint64_t>((static_cast<__uint128_t>(next_u64()) * n) >> 64);
  }

  double normal() {
    double u1;
    do {
      u1 = next_double();
    } while (u1 <= 0.0);
    const double u2 = next_double();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

 private:
  uint64_t state_;
};

inline uint64_t derive_seed(uint64_t master, StreamKind kind, uint64_t a = 0, uint64_t b = 0) {
  uint64_t h = mix64(master ^ kGolden);
  h = mix64(h ^ (static_cast<uint64_t>(kind) + kGolden));
  h = mix64(h ^ (a + kGolden));
  h = mix64(h ^ (b + kGolden));
  return h;
}

inline Rng stream(uint64_t master, StreamKind kind, uint64_t a = 0, uint64_t b = 0) {
  return Rng(derive_seed(master, kind, a, b));
}

}  // namespace fedlps
