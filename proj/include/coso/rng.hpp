#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>

namespace coso {

/// Seeded 64-bit generator with platform-stable real and index draws.
///
/// The std distributions are implementation-defined, so draws are derived
/// directly from the raw mt19937_64 stream to keep artifacts byte-stable.
class Rng {
public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform in [0, 1) with 53 bits of mantissa.
  double uniform() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, bound).
  std::size_t index(std::size_t bound) {
    if (bound == 0) throw std::invalid_argument("Rng::index: empty range");
    // Lemire-free rejection keeps the stream deterministic and unbiased.
    const std::uint64_t limit = UINT64_MAX - (UINT64_MAX % bound);
    std::uint64_t x;
    do {
      x = engine_();
    } while (x >= limit);
    return static_cast<std::size_t>(x % bound);
  }

  /// Draw from an unnormalized-safe categorical (probs assumed to sum to ~1).
  std::size_t categorical(std::span<const double> probs) {
    const double u = uniform();
    double acc = 0.0;
    std::size_t last_positive = 0;
    for (std::size_t k = 0; k < probs.size(); ++k) {
      if (probs[k] <= 0.0) continue;
      acc += probs[k];
      last_positive = k;
      if (u < acc) return k;
    }
    return last_positive;
  }

  /// Derive an independent child seed (splitmix64 finalizer).
  static std::uint64_t mix(std::uint64_t seed, std::uint64_t stream) {
    std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  template <class It>
  void shuffle(It first, It last) {
    const auto n = static_cast<std::size_t>(last - first);
    for (std::size_t i = n; i > 1; --i) {
      std::swap(first[i - 1], first[index(i)]);
    }
  }

private:
  std::mt19937_64 engine_;
};

}  // namespace coso
