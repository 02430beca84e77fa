#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string_view>

namespace prefcodec {

// Bumped whenever the output stream of Rng changes; recorded in file headers.
inline constexpr std::uint32_t kRngVersion = 1;

constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Order-sensitive combination of two 64-bit values into a derived seed.
constexpr std::uint64_t mix64(std::uint64_t a, std::uint64_t b) {
  return splitmix64(splitmix64(a) + splitmix64(b ^ 0xd1b54a32d192ed03ULL));
}

constexpr std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : s) {
    h ^= static_cast<std::uint8_t>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// Counter-based generator: the i-th draw is a pure function of (key, i), so
/// streams can be split by deriving new keys without sharing state.
class Rng {
 public:
  explicit Rng(std::uint64_t key) : key_(key) {}

  static Rng named(std::uint64_t seed, std::string_view name) {
    return Rng(mix64(seed, fnv1a64(name)));
  }

  Rng split(std::uint64_t tag) const { return Rng(mix64(key_, tag)); }

  std::uint64_t key() const { return key_; }

  std::uint64_t next_u64() { return mix64(key_, counter_++); }

  // Uniform on [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double normal() {
    const double u1 = 1.0 - uniform();  // (0, 1]
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
  }

  // Uniform integer in [0, n), n > 0.
  std::uint64_t below(std::uint64_t n) {
    const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
    std::uint64_t r = next_u64();
    while (r >= limit) r = next_u64();
    return r % n;
  }

  // Index drawn from unnormalized non-negative weights.
  int categorical(std::span<const double> weights) {
    double total = 0.0;
    for (double w : weights) total += w;
    const double u = uniform() * total;
    double acc = 0.0;
    int last_positive = 0;
    for (std::size_t i = 0; i < weights.size(); ++i) {
      if (weights[i] <= 0.0) continue;
      acc += weights[i];
      last_positive = static_cast<int>(i);
      if (u < acc) return static_cast<int>(i);
    }
    return last_positive;
  }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

}  // namespace prefcodec
