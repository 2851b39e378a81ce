#pragma once

// Counter-based deterministic randomness. Every draw is a pure function of a
// key tuple, so results do not depend on call order or thread scheduling and
// are identical across standard library implementations.

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numbers>
#include <string_view>

namespace deepterra::rng {

constexpr std::uint64_t splitmix64(std::uint64_t x)
{
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

constexpr std::uint64_t mix(std::uint64_t seed, std::initializer_list<std::uint64_t> counters)
{
  std::uint64_t h = splitmix64(seed);
  for (std::uint64_t c : counters) h = splitmix64(h ^ splitmix64(c + 0x632BE59BD9B4E019ull));
  return h;
}

constexpr std::uint64_t hash_string(std::string_view s)
{
  std::uint64_t h = 0xCBF29CE484222325ull;  // FNV-1a
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001B3ull;
  }
  return h;
}

// Uniform in [0, 1) with 53 bits of precision.
constexpr double to_unit(std::uint64_t bits) { return static_cast<double>(bits >> 11) * 0x1.0p-53; }

inline double uniform(std::uint64_t seed, std::initializer_list<std::uint64_t> counters)
{
  return to_unit(mix(seed, counters));
}

// Sequential generator for loops that need many draws from one stream.
class Stream {
 public:
  using result_type = std::uint64_t;

  explicit Stream(std::uint64_t key) : state_(key) {}

  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return ~result_type{0}; }

  result_type operator()() { return next(); }

  double unit() { return to_unit(next()); }

  double uniform(double lo, double hi) { return lo + (hi - lo) * unit(); }

  // Unbiased integer in [0, n) via rejection.
  std::uint64_t below(std::uint64_t n)
  {
    if (n <= 1) return 0;
    const std::uint64_t limit = max() - max() % n;
    std::uint64_t v;
    do {
      v = next();
    } while (v >= limit);
    return v % n;
  }

  double normal()
  {
    double u1 = unit();
    while (u1 <= 0.0) u1 = unit();
    const double u2 = unit();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

 private:
  std::uint64_t next() { return splitmix64(++state_ * 0x9E3779B97F4A7C15ull); }

  std::uint64_t state_;
};

// Portable Fisher-Yates shuffle.
template <typename Vec>
void shuffle(Vec& v, Stream& s)
{
  for (std::size_t i = v.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(s.below(i));
    using std::swap;
    swap(v[i - 1], v[j]);
  }
}

}  // namespace deepterra::rng
