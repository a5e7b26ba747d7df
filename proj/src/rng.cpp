#include "rrlm/rng.hpp"

#include <cmath>
#include <numbers>

#include "rrlm/error.hpp"

namespace rrlm {

namespace {

uint64_t splitmix64(uint64_t& x) {
  x += 0x9E3779B97F4A7C15ull;
  uint64_t z = x;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

}  // namespace

Rng::Rng(uint64_t seed) {
  uint64_t x = seed;
  for (auto& w : s_) w = splitmix64(x);
}

uint64_t Rng::next_u64() {
  const uint64_t result = rotl(s_[1] * 5, 7) * 9;
  const uint64_t t = s_[1] << 17;
  s_[2] ^= s_[0];
  s_[3] ^= s_[1];
  s_[1] ^= s_[2];
  s_[0] ^= s_[3];
  s_[2] ^= t;
  s_[3] = rotl(s_[3], 45);
  return result;
}

double Rng::uniform() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

int Rng::uniform_int(int n) {
  if (n <= 0) fail(ErrorKind::InvalidArgument, "uniform_int: n must be positive");
  const uint64_t un = static_cast<uint64_t>(n);
  const uint64_t limit = (~uint64_t{0}) - (~uint64_t{0}) % un;
  uint64_t v = next_u64();
  while (v >= limit) v = next_u64();
  return static_cast<int>(v % un);
}

double Rng::normal() {
  // u1 in (0, 1] so the log is finite.
  const double u1 = (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1.0p-53;
  const double u2 = static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  return std::sqrt(-2.0 * std::log(u1)) *
         std::cos(2.0 * std::numbers::pi * u2);
}

uint64_t Rng::mix(uint64_t seed, uint64_t stream) {
  uint64_t x = seed ^ (0xA5A5A5A55A5A5A5Aull + stream * 0x9E3779B97F4A7C15ull);
  uint64_t a = splitmix64(x);
  uint64_t b = splitmix64(x);
  return a ^ rotl(b, 32);
}

}  // namespace rrlm
