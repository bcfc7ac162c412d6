#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdint>
#include <vector>

#include "fedsim/half.hpp"

using namespace fedsim;

namespace {

// Value of a binary16 bit pattern computed directly from the format
// definition, independent of the conversion routines under test.
double half_value(uint16_t h) {
  const int sign = (h & 0x8000) ? -1 : 1;
  const int exp = (h >> 10) & 0x1f;
  const int mant = h & 0x3ff;
  if (exp == 0) return sign * std::ldexp(static_cast<double>(mant), -24);
  return sign * std::ldexp(static_cast<double>(1024 + mant), exp - 25);
}

bool is_finite_pattern(uint16_t h) { return ((h >> 10) & 0x1f) != 0x1f; }

}  // namespace

TEST_CASE("every finite half round-trips exactly") {
  for (uint32_t bits = 0; bits <= 0xffff; ++bits) {
    const auto h = static_cast<uint16_t>(bits);
    if (!is_finite_pattern(h)) continue;
    const double v = half_to_double(h);
    REQUIRE(v == half_value(h));
    bool saturated = false;
    REQUIRE(half_from_double(v, &saturated) == h);
    REQUIRE_FALSE(saturated);
  }
}

TEST_CASE("decoded values are monotone in the ordered bit patterns") {
  // Negative patterns descending, then positive ascending, enumerates the
  // finite halves in value order (with -0 and +0 adjacent and equal).
  std::vector<uint16_t> ordered;
  for (int bits = 0xfbff; bits >= 0x8000; --bits) ordered.push_back(static_cast<uint16_t>(bits));
  for (int bits = 0x0000; bits <= 0x7bff; ++bits) ordered.push_back(static_cast<uint16_t>(bits));
  for (size_t i = 1; i < ordered.size(); ++i) {
    const double a = half_to_double(ordered[i - 1]);
    const double b = half_to_double(ordered[i]);
    if (ordered[i - 1] == 0x8000 && ordered[i] == 0x0000) {
      REQUIRE(a == b);
    } else {
      REQUIRE(a < b);
    }
  }
}

TEST_CASE("ties round to the even mantissa") {
  // For each adjacent pair of positive finite halves, the exact midpoint must
  // round to whichever neighbour has an even mantissa, and points just off
  // the midpoint must round toward the nearer neighbour.
  for (uint16_t h = 0; h < 0x7bff; ++h) {
    const uint16_t next = h + 1;
    const double lo = half_value(h);
    const double hi = half_value(next);
    const double mid = (lo + hi) / 2.0;  // exactly representable in binary64
    const uint16_t even = (h & 1) == 0 ? h : next;
    REQUIRE(half_from_double(mid) == even);
    REQUIRE(half_from_double(std::nextafter(mid, lo)) == h);
    REQUIRE(half_from_double(std::nextafter(mid, hi)) == next);
  }
}

TEST_CASE("values beyond the largest half saturate and report it") {
  bool saturated = false;
  REQUIRE(half_from_double(65504.0, &saturated) == kHalfMaxBits);
  REQUIRE_FALSE(saturated);

  REQUIRE(half_from_double(65505.0, &saturated) == kHalfMaxBits);
  REQUIRE(saturated);

  saturated = false;
  REQUIRE(half_from_double(-1e300, &saturated) == (0x8000 | kHalfMaxBits));
  REQUIRE(saturated);

  saturated = false;
  REQUIRE(half_from_double(1e9, &saturated) == kHalfMaxBits);
  REQUIRE(saturated);
}

TEST_CASE("known conversions") {
  REQUIRE(half_from_double(0.0) == 0x0000);
  REQUIRE(half_from_double(-0.0) == 0x8000);
  REQUIRE(half_from_double(1.0) == 0x3c00);
  REQUIRE(half_from_double(-2.0) == 0xc000);
  REQUIRE(half_from_double(0.5) == 0x3800);
  REQUIRE(half_from_double(65504.0) == 0x7bff);

  // 1/3 is inexact; nearest half is 0.333251953125.
  REQUIRE(half_to_double(half_from_double(1.0 / 3.0)) == 0.333251953125);

  // Smallest subnormal and the ulp boundary around it.
  REQUIRE(half_from_double(std::ldexp(1.0, -24)) == 0x0001);
  REQUIRE(half_from_double(std::ldexp(1.0, -25)) == 0x0000);  // tie, even = 0
  REQUIRE(half_from_double(std::ldexp(1.5, -25)) == 0x0001);

  // Largest subnormal and smallest normal.
  REQUIRE(half_from_double(std::ldexp(1023.0, -24)) == 0x03ff);
  REQUIRE(half_from_double(std::ldexp(1.0, -14)) == 0x0400);

  // Rounding a near-boundary subnormal carries into the normal range.
  const double just_below = std::ldexp(1.0, -14) * (1.0 - std::ldexp(1.0, -12));
  REQUIRE(half_from_double(just_below) == 0x0400);
}

TEST_CASE("rounding error never exceeds half an ulp") {
  // Random doubles inside the half range must land on one of the two
  // bracketing representable values, never further away.
  uint64_t state = 0x9e3779b97f4a7c15ull;
  auto next = [&state] {
    state += 0x9e3779b97f4a7c15ull;
    uint64_t z = state;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  };
  for (int i = 0; i < 200000; ++i) {
    const double u = static_cast<double>(next() >> 11) * 0x1.0p-53;
    const double v = (u * 2.0 - 1.0) * 65504.0;
    const uint16_t h = half_from_double(v);
    const double back = half_to_double(h);
    // Distance to the chosen value must not exceed the distance to any
    // neighbouring representable value.
    if (is_finite_pattern(h + 1) && (h & 0x7fff) != 0x7bff) {
      const double alt = half_value(h + 1);
      REQUIRE(std::fabs(v - back) <= std::fabs(v - alt) + 1e-300);
    }
    if ((h & 0x7fff) != 0) {
      const double alt = half_value(h - 1);
      REQUIRE(std::fabs(v - back) <= std::fabs(v - alt) + 1e-300);
    }
  }
}
