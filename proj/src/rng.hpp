#pragma once

#include <cstdint>
#include <random>
#include <vector>

namespace rnnctp {

// Deterministic RNG wrapper. All draws go through explicitly specified
// algorithms (mt19937_64 output, rejection-sampled bounded draws, hand-rolled
// Fisher-Yates) so that results are reproducible across platforms and
// standard-library versions.
class Rng {
 public:
  explicit Rng(uint64_t seed) : engine_(seed) {}

  uint64_t next_u64() { return engine_(); }

  // Uniform integer in [0, n). Rejection sampling keeps the draw unbiased
  // and independent of library internals.
  uint64_t below(uint64_t n) {
    if (n <= 1) return 0;
    const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    uint64_t x;
    do {
      x = engine_();
    } while (x >= limit);
    return x % n;
  }

  // Uniform double in [0, 1) with 53 bits of precision.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = static_cast<size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::mt19937_64 engine_;
};

// Derives an independent, reproducible substream from (seed, stream).
inline Rng make_rng(uint64_t seed, uint64_t stream = 0) {
  uint64_t s = seed ^ (0x9e3779b97f4a7c15ULL * (stream + 1));
  s ^= s >> 30;
  s *= 0xbf58476d1ce4e5b9ULL;
  s ^= s >> 27;
  return Rng(s);
}

}  // namespace rnnctp
