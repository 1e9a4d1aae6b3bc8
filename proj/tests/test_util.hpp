#pragma once

#include <cmath>
#include <cstdint>

// Exact rational-arithmetic check that q is a nearest double to N / D
// (N, D positive 64-bit integers small enough that all products below fit
// in __int128). Used as the independent oracle for the GSB ratio.
inline bool is_nearest_double(long long N, long long D, double q) {
  if (D <= 0 || N < 0) return false;
  if (!std::isfinite(q) || q < 0.0) return false;

  // |N/D - x| comparison via exact integers: decompose x = m * 2^(e-52).
  auto err_cmp = [&](double x) -> __int128 {
    int e = 0;
    double frac = std::frexp(x, &e);          // x = frac * 2^e, frac in [0.5, 1)
    long long m = std::llround(frac * 9007199254740992.0);  // 2^53
    int shift = 53 - e;                        // x = m * 2^-shift
    // err = |N * 2^shift - m * D|  (scaled by D * 2^shift, same for all x)
    __int128 lhs = static_cast<__int128>(N);
    __int128 rhs = static_cast<__int128>(m) * D;
    if (shift >= 0)
      lhs <<= shift;
    else
      rhs <<= -shift;
    __int128 d = lhs - rhs;
    return d < 0 ? -d : d;
  };

  __int128 here = err_cmp(q);
  __int128 up = err_cmp(std::nextafter(q, std::numeric_limits<double>::infinity()));
  __int128 down = err_cmp(std::nextafter(q, -std::numeric_limits<double>::infinity()));
  return here <= up && here <= down;
}
