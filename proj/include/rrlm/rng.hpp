#pragma once

#include <array>
#include <cstdint>

namespace rrlm {

// xoshiro256** seeded through splitmix64. Every random draw in the project
// goes through this class so a run is reproducible bit-for-bit from one seed,
// independent of platform library implementations.
class Rng {
 public:
  explicit Rng(uint64_t seed);

  uint64_t next_u64();
  // Uniform double in [0, 1), 53-bit resolution.
  double uniform();
  // Unbiased integer in [0, n). n must be positive.
  int uniform_int(int n);
  // Standard normal via Box-Muller (no internal caching, so the state is
  // exactly the four words below).
  double normal();

  // Deterministic child-seed derivation, e.g. per-sample streams.
  static uint64_t mix(uint64_t seed, uint64_t stream);

  std::array<uint64_t, 4> state() const { return s_; }
  void set_state(const std::array<uint64_t, 4>& s) { s_ = s; }

 private:
  std::array<uint64_t, 4> s_;
};

}  // namespace rrlm
