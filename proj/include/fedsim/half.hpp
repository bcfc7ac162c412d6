#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <limits>

namespace fedsim {

// IEEE 754 binary16 conversion. Values are held as double in memory and only
// narrowed at serialization boundaries. Rounding is round-to-nearest-even;
// magnitudes beyond the binary16 range saturate to the largest finite half
// (65504) instead of overflowing to infinity, and callers count those events.

inline constexpr double kHalfMax = 65504.0;
inline constexpr uint16_t kHalfMaxBits = 0x7bff;

namespace detail {

// Round v to v >> shift with ties to even. v must fit the significand of a
// finite double (< 2^53), so shifts past 63 always round to zero.
inline uint64_t shift_round_even(uint64_t v, unsigned shift) {
  if (shift == 0) return v;
  if (shift > 63) return 0;
  const uint64_t q = v >> shift;
  const uint64_t rem = v & ((uint64_t{1} << shift) - 1);
  const uint64_t half = uint64_t{1} << (shift - 1);
  if (rem > half || (rem == half && (q & 1))) return q + 1;
  return q;
}

}  // namespace detail

// Requires finite x; non-finite inputs are rejected upstream before encoding.
inline uint16_t half_from_double(double x, bool* saturated = nullptr) {
  const uint64_t bits = std::bit_cast<uint64_t>(x);
  const uint16_t sign = static_cast<uint16_t>((bits >> 48) & 0x8000u);
  const int biased = static_cast<int>((bits >> 52) & 0x7ffu);
  const uint64_t mant = bits & 0x000f'ffff'ffff'ffffull;

  if (std::fabs(x) > kHalfMax) {
    if (saturated) *saturated = true;
    return static_cast<uint16_t>(sign | kHalfMaxBits);
  }
  if (biased == 0) return sign;  // +-0 and double subnormals, all far below half resolution

  const int e = biased - 1023;
  const uint64_t full = (uint64_t{1} << 52) | mant;
  if (e >= -14) {
    uint64_t m = detail::shift_round_even(full, 42);
    int he = e;
    if (m == (uint64_t{1} << 11)) {  // significand overflow carries into the exponent
      m >>= 1;
      ++he;
    }
    return static_cast<uint16_t>(sign | ((he + 15) << 10) | (m & 0x3ffu));
  }
  // Subnormal half range: drop extra bits as the exponent falls below -14.
  const unsigned drop = static_cast<unsigned>(42 + (-14 - e));
  const uint64_t m = detail::shift_round_even(full, drop);
  // m == 1024 lands exactly on the smallest normal encoding.
  return static_cast<uint16_t>(sign | m);
}

inline double half_to_double(uint16_t h) {
  const double sign = (h & 0x8000u) ? -1.0 : 1.0;
  const int e = (h >> 10) & 0x1f;
  const int m = h & 0x3ff;
  if (e == 0) return sign * std::ldexp(static_cast<double>(m), -24);
  if (e == 31) {
    return m != 0 ? std::numeric_limits<double>::quiet_NaN()
                  : sign * std::numeric_limits<double>::infinity();
  }
  return sign * std::ldexp(static_cast<double>(1024 + m), e - 25);
}

}  // namespace fedsim
