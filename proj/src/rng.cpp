#include "mole/rng.hpp"

#include <limits>

#include "mole/errors.hpp"

namespace mole {
namespace {

// splitmix64 step (Vigna). Full-period, trivially seedable, portable.
std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

std::uint64_t mix_key(std::uint64_t seed, std::uint64_t purpose, std::uint64_t salt) {
  // Run each key component through the mixer so nearby seeds and purposes
  // land in unrelated regions of the state space.
  std::uint64_t s = seed;
  std::uint64_t a = splitmix64(s);
  s ^= purpose * 0xd1342543de82ef95ULL;
  std::uint64_t b = splitmix64(s);
  s ^= salt * 0xaf251af3b0f025b5ULL;
  std::uint64_t c = splitmix64(s);
  return a ^ (b << 1) ^ (c >> 1);
}

}  // namespace

const char* to_string(RngPurpose purpose) {
  switch (purpose) {
    case RngPurpose::kWeightInit: return "weight-init";
    case RngPurpose::kGumbelNoise: return "gumbel-noise";
    case RngPurpose::kDataShuffle: return "data-shuffle";
  }
  return "unknown";
}

RngStream::RngStream(std::uint64_t seed, RngPurpose purpose, std::uint64_t salt)
    : seed_(seed),
      purpose_(purpose),
      state_(mix_key(seed, static_cast<std::uint64_t>(purpose), salt)) {}

std::uint64_t RngStream::next_u64() { return splitmix64(state_); }

double RngStream::next_uniform() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double RngStream::next_open_uniform() {
  // (x + 0.5) / 2^53 lies strictly inside (0, 1).
  return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53;
}

double RngStream::next_uniform_range(double lo, double hi) {
  return lo + (hi - lo) * next_uniform();
}

std::uint64_t RngStream::next_below(std::uint64_t n) {
  if (n == 0) throw Error("RngStream::next_below: n must be positive");
  const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % n;
  std::uint64_t x = next_u64();
  while (x >= limit) x = next_u64();
  return x % n;
}

}  // namespace mole
