// Deterministic, purpose-keyed random streams.
#pragma once

#include <cstdint>
#include <vector>

namespace mole {

/// What a stream is for. Streams with different purposes never overlap,
/// so consuming gumbel noise cannot shift weight initialization.
enum class RngPurpose : std::uint64_t {
  kWeightInit = 1,
  kGumbelNoise = 2,
  kDataShuffle = 3,
};

const char* to_string(RngPurpose purpose);

/// Splittable counter-style generator (splitmix64 core). The state is a
/// pure function of (seed, purpose, salt), so equal keys give bit-equal
/// sequences on every platform. `salt` separates phases that must draw
/// independently under the same seed (e.g. a fresh init after pruning).
class RngStream {
 public:
  RngStream(std::uint64_t seed, RngPurpose purpose, std::uint64_t salt = 0);

  std::uint64_t seed() const { return seed_; }
  RngPurpose purpose() const { return purpose_; }

  std::uint64_t next_u64();

  /// Uniform in [0, 1) with 53-bit resolution.
  double next_uniform();

  /// Uniform in the open interval (0, 1); safe as a -log(-log(u)) argument.
  double next_open_uniform();

  /// Uniform in [lo, hi).
  double next_uniform_range(double lo, double hi);

  /// Unbiased integer in [0, n) via rejection sampling. n must be > 0.
  std::uint64_t next_below(std::uint64_t n);

  /// Deterministic Fisher-Yates shuffle.
  template <typename T>
  void shuffle(std::vector<T>& items) {
    if (items.size() < 2) return;
    for (std::size_t i = items.size() - 1; i > 0; --i) {
      const std::size_t j = static_cast<std::size_t>(next_below(i + 1));
      std::swap(items[i], items[j]);
    }
  }

 private:
  std::uint64_t seed_;
  RngPurpose purpose_;
  std::uint64_t state_;
};

}  // namespace mole
