#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <random>

namespace volt {

using Rng = std::mt19937_64;

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Counter-based seed derivation: the stream for (seed, a, b, ...) does not
// depend on how many other streams were drawn before it.
inline std::uint64_t derive_seed(std::uint64_t seed, std::initializer_list<std::uint64_t> counters) {
  std::uint64_t h = splitmix64(seed);
  for (auto c : counters) h = splitmix64(h ^ splitmix64(c + 0x632be59bd9b4e019ULL));
  return h;
}

inline double uniform(Rng& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

inline bool bernoulli(Rng& rng, double p) {
  if (p <= 0.0) return false;
  if (p >= 1.0) return true;
  return std::uniform_real_distribution<double>(0.0, 1.0)(rng) < p;
}

// Normal(0, sigma) truncated to [-2 sigma, 2 sigma] by rejection.
inline double truncated_normal(Rng& rng, double sigma) {
  std::normal_distribution<double> dist(0.0, 1.0);
  for (;;) {
    double z = dist(rng);
    if (std::abs(z) <= 2.0) return z * sigma;
  }
}

} // namespace volt
