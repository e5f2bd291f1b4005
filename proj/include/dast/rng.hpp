#pragma once

// Seeded random streams. Every stochastic routine in the library takes a
// Rng derived from a single 64-bit run seed plus a named substream, so that
// results are reproducible and substreams are independent of execution
// order and thread count.

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <string_view>

namespace dast {

namespace detail {

// FNV-1a, used only to hash substream names into the seed sequence.
inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

inline std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ull);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

}  // namespace detail

// mt19937_64 gives identical streams on every platform; the distributions
// below are hand-rolled because the std:: ones are implementation-defined.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  static Rng substream(std::uint64_t seed, std::string_view name,
                       std::uint64_t index = 0) {
    std::uint64_t state = seed ^ detail::fnv1a(name);
    state ^= 0x632be59bd9b4e019ull * (index + 1);
    std::uint64_t s0 = detail::splitmix64(state);
    std::uint64_t s1 = detail::splitmix64(state);
    return Rng(s0 ^ (s1 << 1));
  }

  std::uint64_t next_u64() { return engine_(); }

  // Uniform on (0,1); never returns 0 or 1.
  double uniform() {
    while (true) {
      double u = (engine_() >> 11) * 0x1.0p-53;
      if (u > 0.0 && u < 1.0) return u;
    }
  }

  double uniform(double a, double b) { return a + (b - a) * uniform(); }

  // Box-Muller; caches the second deviate.
  double normal() {
    if (has_cached_) {
      has_cached_ = false;
      return cached_;
    }
    double u1 = uniform();
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double theta = 6.283185307179586476925286766559 * u2;
    cached_ = r * std::sin(theta);
    has_cached_ = true;
    return r * std::cos(theta);
  }

  double normal(double mean, double sd) { return mean + sd * normal(); }

  // Integer in [0, n).
  std::uint64_t below(std::uint64_t n) {
    // rejection sampling to avoid modulo bias
    std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
    std::uint64_t v;
    do {
      v = engine_();
    } while (v >= limit);
    return v % n;
  }

  // Binomial via m Bernoulli trials; m stays small (survey sizes).
  int binomial(int m, double p) {
    int y = 0;
    for (int i = 0; i < m; ++i)
      if (uniform() < p) ++y;
    return y;
  }

  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
  double cached_ = 0.0;
  bool has_cached_ = false;
};

}  // namespace dast
