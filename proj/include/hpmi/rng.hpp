#pragma once

#include <cstdint>
#include <random>
#include <vector>

namespace hpmi {

// Derives an independent stream seed from a master seed. Streams are named by
// small integers so every pipeline stage gets its own reproducible RNG.
uint64_t derive_seed(uint64_t master, uint64_t stream);

// Deterministic RNG. The engine is std::mt19937_64 (bit-exact everywhere);
// all distributions are built from raw engine output rather than the
// implementation-defined <random> distributions.
class Rng {
 public:
  explicit Rng(uint64_t seed) : engine_(seed) {}

  uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform_in(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Standard normal via Box-Muller.
  double normal();

  // Normal(0, sigma^2) resampled until |z| <= clip_sigmas.
  double trunc_normal(double sigma, double clip_sigmas = 2.0);

  // Uniform integer in [0, n).
  int64_t uniform_int(int64_t n);

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (int64_t i = static_cast<int64_t>(v.size()) - 1; i > 0; --i) {
      std::swap(v[static_cast<size_t>(i)], v[static_cast<size_t>(uniform_int(i + 1))]);
    }
  }

 private:
  std::mt19937_64 engine_;
};

}  // namespace hpmi
