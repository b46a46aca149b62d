#include "hpmi/rng.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace hpmi {

namespace {
uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}
}  // namespace

uint64_t derive_seed(uint64_t master, uint64_t stream) { return splitmix64(splitmix64(master) ^ splitmix64(stream)); }

double Rng::normal() {
  // Box-Muller without pair caching: one fresh draw per call.
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

double Rng::trunc_normal(double sigma, double clip_sigmas) {
  double z = normal();
  while (std::abs(z) > clip_sigmas) z = normal();
  return sigma * z;
}

int64_t Rng::uniform_int(int64_t n) {
  if (n <= 0) throw std::invalid_argument("uniform_int: n must be positive");
  const uint64_t un = static_cast<uint64_t>(n);
  const uint64_t limit = UINT64_MAX - UINT64_MAX % un;
  uint64_t x = next_u64();
  while (x >= limit) x = next_u64();
  return static_cast<int64_t>(x % un);
}

}  // namespace hpmi
