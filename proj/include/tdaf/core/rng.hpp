#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace tdaf {

inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Deterministic random stream: std::mt19937_64 (bit-exact per the C++
/// standard) with explicit value transforms, so results are identical across
/// platforms and standard-library implementations. Named streams decouple
/// consumers: the values drawn for one purpose never shift another's.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  /// Independent stream for (seed, tag). Parameter init uses the parameter
  /// name as the tag, so init is insensitive to construction order.
  static Rng stream(std::uint64_t seed, std::string_view tag) {
    return Rng(splitmix64(seed ^ fnv1a64(tag)));
  }

  std::uint64_t next_u64() { return gen_(); }

  /// Uniform in [0, 1): top 53 bits scaled.
  double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Integer in [0, n). Modulo of a 64-bit draw; bias is < 2^-53 for any n
  /// used here.
  std::uint64_t uniform_index(std::uint64_t n) { return next_u64() % n; }

  /// Standard normal via Box-Muller: z = sqrt(-2 ln u1) cos(2 pi u2),
  /// u1 in (0, 1]. Two uniforms per draw, no cached spare.
  double normal() {
    double u1 = 1.0 - uniform();
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
  }

  /// Fisher-Yates shuffle.
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = std::size_t(uniform_index(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::mt19937_64 gen_;
};

}  // namespace tdaf
