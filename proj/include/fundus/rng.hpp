#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <string_view>

namespace fundus {

// Counter-based generator (splitmix64). The whole pipeline draws from this
// one primitive so that every sampled record is reproducible from a seed and
// portable across platforms; std::uniform_real_distribution is
// implementation-defined and is deliberately not used anywhere.
//
// Draw-order contract: each named method consumes a fixed number of raw
// 64-bit draws — uniform01/uniform/uniform_int consume exactly one,
// normal consumes exactly two (Box-Muller, no caching).
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ull);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

  // [0, 1) with 53 random mantissa bits.
  double uniform01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + uniform01() * (hi - lo); }

  // Inclusive integer range, one draw.
  long uniform_int(long lo, long hi) {
    const auto n = static_cast<std::uint64_t>(hi - lo + 1);
    auto k = static_cast<std::uint64_t>(uniform01() * static_cast<double>(n));
    if (k >= n) k = n - 1;
    return lo + static_cast<long>(k);
  }

  // Standard normal via Box-Muller; always two draws.
  double normal() {
    double u1 = uniform01();
    double u2 = uniform01();
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  std::uint64_t state() const { return state_; }
  void set_state(std::uint64_t s) { state_ = s; }

  // Derives an independent stream seed from a root seed and a key path.
  // Used as derive(seed, {tag, epoch, id, ...}); tags come from key().
  static std::uint64_t derive(std::uint64_t seed, std::initializer_list<std::uint64_t> keys) {
    std::uint64_t s = mix(seed ^ 0xA0761D6478BD642Full);
    for (std::uint64_t k : keys) s = mix(s ^ mix(k + 0xE7037ED1A0B428DBull));
    return s;
  }

  // FNV-1a tag for string stream names.
  static constexpr std::uint64_t key(std::string_view name) {
    std::uint64_t h = 0xCBF29CE484222325ull;
    for (char c : name) {
      h ^= static_cast<unsigned char>(c);
      h *= 0x100000001B3ull;
    }
    return h;
  }

 private:
  static std::uint64_t mix(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

  std::uint64_t state_;
};

}  // namespace fundus
