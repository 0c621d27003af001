#ifndef STREAMLOC_RNG_HPP
#define STREAMLOC_RNG_HPP

#include <cmath>
#include <cstdint>
#include <random>
#include <string>

namespace streamloc {

// Seeded generator with hand-rolled distributions. The mt19937_64 engine is
// fully specified by the standard; the distributions in <random> are not, so
// uniform/normal are implemented here to keep outputs identical across
// standard libraries.
class Rng {
 public:
  explicit Rng(uint64_t seed) : engine_(seed) {}

  uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1).
  double uniform() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [lo, hi] inclusive.
  int64_t uniform_int(int64_t lo, int64_t hi) {
    uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
    // Rejection sampling to avoid modulo bias.
    uint64_t limit = UINT64_MAX - UINT64_MAX % span;
    uint64_t v = engine_();
    while (v >= limit) v = engine_();
    return lo + static_cast<int64_t>(v % span);
  }

  bool bernoulli(double p) { return uniform() < p; }

  // Standard normal via Box-Muller; one value per call, cached pair unused
  // so that call counts stay easy to reason about.
  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    while (u1 <= 1e-300) u1 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  // Derives an independent stream for a named purpose. FNV-1a over the tag
  // mixed with the parent's next output.
  Rng fork(const std::string& tag) {
    uint64_t h = 1469598103934665603ull;
    for (char c : tag) {
      h ^= static_cast<uint8_t>(c);
      h *= 1099511628211ull;
    }
    return Rng(h ^ engine_());
  }

 private:
  std::mt19937_64 engine_;
};

}  // namespace streamloc

#endif  // STREAMLOC_RNG_HPP
