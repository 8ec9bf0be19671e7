#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "cnd/error.hpp"

namespace cnd {

/// One splitmix64 step. Advances `state` and returns the next output.
inline uint64_t splitmix64(uint64_t& state) {
  uint64_t z = (state += 0x9E3779B97F4A7C15ull);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

/// Deterministic stream derivation: expands a master seed and up to two
/// salts into an independent stream seed. Every consumer of randomness gets
/// its own (master, salt_a, salt_b) triple so streams never overlap and
/// adding a consumer never shifts another consumer's draws.
inline uint64_t derive_seed(uint64_t master, uint64_t salt_a, uint64_t salt_b = 0) {
  uint64_t s = master;
  uint64_t h = splitmix64(s);
  s ^= 0x632BE59BD9B4E019ull + salt_a * 0x9E3779B97F4A7C15ull;
  h ^= splitmix64(s);
  s ^= 0xAEF17502108EF2D9ull + salt_b * 0xD1B54A32D192ED03ull;
  h ^= splitmix64(s);
  return h;
}

/// Salt tags for derive_seed. Fixed numbering is part of the reproducibility
/// contract: renumbering changes every downstream stream.
enum SeedTag : uint64_t {
  kSeedData = 1,
  kSeedModel = 2,
  kSeedTrain = 3,
  kSeedBuffer = 4,
  kSeedVae = 5,
  kSeedScore = 6,
  kSeedCalibration = 7,
};

/// xoshiro256++ with splitmix-seeded state. All distributions are written
/// out explicitly (no std::*_distribution) so that identical seeds give
/// identical draws on any platform/compiler.
class Rng {
 public:
  explicit Rng(uint64_t seed) {
    uint64_t sm = seed;
    for (auto& w : state_) w = splitmix64(sm);
  }

  uint64_t next_u64() {
    const uint64_t result = rotl(state_[0] + state_[3], 23) + state_[0];
    const uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
  }

  /// Uniform double in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Standard normal via Box-Muller; the second draw of each pair is cached.
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    if (u1 <= 0.0) u1 = 0x1.0p-53;
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

  /// Uniform integer in [0, n). Lemire's multiply-shift without the
  /// rejection loop; bias is < n / 2^64, irrelevant at our n.
  uint64_t uniform_int(uint64_t n) {
    if (n == 0) throw ValueError("uniform_int: n must be positive");
    return static_cast<uint64_t>(
        (static_cast<__uint128_t>(next_u64()) * static_cast<__uint128_t>(n)) >> 64);
  }

  /// Fisher-Yates shuffle.
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      const size_t j = static_cast<size_t>(uniform_int(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  /// k distinct indices drawn uniformly from [0, n), in draw order
  /// (partial Fisher-Yates). Requires k <= n.
  std::vector<size_t> sample_without_replacement(size_t n, size_t k) {
    if (k > n) throw ValueError("sample_without_replacement: k > n");
    std::vector<size_t> pool(n);
    for (size_t i = 0; i < n; ++i) pool[i] = i;
    std::vector<size_t> out;
    out.reserve(k);
    for (size_t i = 0; i < k; ++i) {
      const size_t j = i + static_cast<size_t>(uniform_int(n - i));
      std::swap(pool[i], pool[j]);
      out.push_back(pool[i]);
    }
    return out;
  }

 private:
  static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

  uint64_t state_[4];
  double spare_ = 0.0;
  bool have_spare_ = false;
};

}  // namespace cnd
