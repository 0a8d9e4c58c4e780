#pragma once

// Deterministic random streams. The standard <random> distributions are
// implementation-defined, which would break byte-identical regeneration of
// fixtures across toolchains, so the few draws we need are spelled out here.
// Streams derived from (seed, index) are stable regardless of scheduling.

#include <cmath>
#include <cstdint>

namespace fovealnet {

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  // Independent substream for item `index` of a seeded sequence.
  static Rng stream(std::uint64_t seed, std::uint64_t index) {
    Rng r(seed ^ (0x9E3779B97F4A7C15ULL * (index + 1)));
    r.next_u64();  // decorrelate nearby seeds
    return r;
  }

  std::uint64_t next_u64() {  // splitmix64
    std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1).
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  int uniform_int(int lo, int hi) {  // inclusive bounds
    return lo + static_cast<int>(next_u64() % static_cast<std::uint64_t>(
                                                  hi - lo + 1));
  }

  // Box-Muller; one spare cached per pair of draws.
  double normal(double mean = 0.0, double stddev = 1.0) {
    if (has_spare_) {
      has_spare_ = false;
      return mean + stddev * spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double radius = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * 3.14159265358979323846 * u2;
    spare_ = radius * std::sin(theta);
    has_spare_ = true;
    return mean + stddev * radius * std::cos(theta);
  }

 private:
  std::uint64_t state_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace fovealnet
