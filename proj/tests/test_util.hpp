#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <limits>
#include <random>
#include <string>

namespace dualprec::testing {

// distance in representable doubles; both must be finite and same sign
inline std::uint64_t ulp_distance(double a, double b) {
  if (a == b) return 0;
  if (std::signbit(a) != std::signbit(b)) return std::numeric_limits<std::uint64_t>::max();
  const auto ia = std::bit_cast<std::int64_t>(std::abs(a));
  const auto ib = std::bit_cast<std::int64_t>(std::abs(b));
  return static_cast<std::uint64_t>(ia > ib ? ia - ib : ib - ia);
}

// scan every level, keep the closest; ties go to the larger magnitude
inline std::int32_t brute_force_nearest_level(double x, double scale, std::int32_t lo, std::int32_t hi) {
  std::int32_t best = lo;
  long double best_d = std::numeric_limits<long double>::infinity();
  const long double t = static_cast<long double>(x) / scale;
  for (std::int32_t l = lo; l <= hi; ++l) {
    const long double d = std::fabs(t - l);
    if (d < best_d || (d == best_d && std::abs(l) > std::abs(best))) {
      best = l;
      best_d = d;
    }
  }
  return best;
}

inline std::filesystem::path temp_dir(const std::string& tag) {
  static std::mt19937_64 rng(std::random_device{}());
  auto p = std::filesystem::temp_directory_path() / ("dualprec_" + tag + "_" + std::to_string(rng() % 1000000000));
  std::filesystem::create_directories(p);
  return p;
}

inline std::string data_dir() {
  const char* env = std::getenv("DUALPREC_DATA");
  return env ? env : "";
}

}  // namespace dualprec::testing
