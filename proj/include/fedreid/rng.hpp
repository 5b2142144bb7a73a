#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numbers>
#include <random>
#include <utility>

namespace fedreid {

// Stream tags used when deriving per-purpose seeds from a run seed.
enum class Stream : std::uint64_t {
  server = 1,
  client = 2,
  select = 3,
  shuffle = 4,
  kd = 5,
  probe = 6,
  domain = 7,
  shared = 8,
  backbone_init = 9,
  head_init = 10,
};

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

/// Mixes a base seed with a sequence of tags into an independent child seed.
inline std::uint64_t derive_seed(std::uint64_t seed, std::initializer_list<std::uint64_t> tags) {
  std::uint64_t h = splitmix64(seed);
  for (std::uint64_t t : tags) h = splitmix64(h ^ splitmix64(t + 0x632BE59BD9B4E019ULL));
  return h;
}

inline std::uint64_t derive_seed(std::uint64_t seed, Stream s, std::initializer_list<std::uint64_t> tags = {}) {
  std::uint64_t h = derive_seed(seed, {static_cast<std::uint64_t>(s)});
  return tags.size() == 0 ? h : derive_seed(h, tags);
}

// The standard distributions are implementation-defined, so conversions from
// raw engine output are done here to keep artifacts identical across stdlibs.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next() { return engine_(); }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Unbiased integer in [0, n).
  std::uint64_t below(std::uint64_t n) {
    const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
    std::uint64_t r;
    do {
      r = engine_();
    } while (r >= limit);
    return r % n;
  }

  /// Standard normal via Box-Muller (second variate discarded).
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  template <class Vec>
  void shuffle(Vec& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      const auto j = static_cast<std::size_t>(below(i));
      using std::swap;
      swap(v[i - 1], v[j]);
    }
  }

 private:
  std::mt19937_64 engine_;
};

}  // namespace fedreid
