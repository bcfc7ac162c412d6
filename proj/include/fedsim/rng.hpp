#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string_view>
#include <vector>

namespace fedsim {

// Deterministic PRNG with a fixed algorithm so that seeded results are
// reproducible across platforms and standard library implementations.
// splitmix64 core; Box-Muller for normals.
class DetRng {
 public:
  explicit DetRng(uint64_t seed) : state_(seed) {}

  uint64_t next_u64() {
    uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1), 53-bit resolution.
  double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform integer in [0, bound) without modulo bias.
  uint64_t next_below(uint64_t bound) {
    if (bound == 0) return 0;
    const uint64_t limit = UINT64_MAX - UINT64_MAX % bound;
    uint64_t v;
    do {
      v = next_u64();
    } while (v >= limit);
    return v % bound;
  }

  double next_normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1;
    do {
      u1 = next_double();
    } while (u1 <= 0.0);
    const double u2 = next_double();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(theta);
    have_spare_ = true;
    return r * std::cos(theta);
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    if (v.size() < 2) return;
    for (size_t i = v.size() - 1; i > 0; --i) {
      const size_t j = static_cast<size_t>(next_below(i + 1));
      std::swap(v[i], v[j]);
    }
  }

 private:
  uint64_t state_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

// Stable seed derivation: combines a base seed with a stream label so that
// independent consumers (per client, per epoch, per purpose) never share a
// stream by accident. FNV-1a over the label folded into splitmix of the seed.
inline uint64_t derive_seed(uint64_t base, std::string_view label) {
  uint64_t h = 0xcbf29ce484222325ull;
  for (const char c : label) {
    h ^= static_cast<uint8_t>(c);
    h *= 0x100000001b3ull;
  }
  DetRng mix(base ^ h);
  return mix.next_u64();
}

inline uint64_t derive_seed(uint64_t base, std::string_view label, uint64_t index) {
  uint64_t h = derive_seed(base, label);
  DetRng mix(h + 0x9e3779b97f4a7c15ull * (index + 1));
  return mix.next_u64();
}

}  // namespace fedsim
