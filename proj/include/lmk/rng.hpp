// Copyright 2026 The lmk Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <numbers>

namespace lmk {

/// splitmix64 output function.
constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

constexpr std::uint64_t hash_key(std::uint64_t seed, std::initializer_list<std::uint64_t> key) noexcept {
  std::uint64_t h = mix64(seed ^ 0x6a09e667f3bcc909ULL);
  for (std::uint64_t k : key) h = mix64(h ^ mix64(k + 0x3c6ef372fe94f82bULL));
  return h;
}

/// Maps 64 random bits to a double in [0, 1).
constexpr double to_unit(std::uint64_t bits) noexcept {
  return static_cast<double>(bits >> 11) * 0x1.0p-53;
}

/// Counter-based random stream. Every stream is identified by (seed, key...)
/// and its n-th draw depends only on that identity and n, so streams can be
/// consumed in any order or from any thread without changing results.
class KeyedRng {
 public:
  explicit KeyedRng(std::uint64_t seed, std::initializer_list<std::uint64_t> key = {}) noexcept
      : key_(hash_key(seed, key)) {}

  std::uint64_t next_u64() noexcept { return mix64(key_ + 0xd1b54a32d192ed03ULL * ++counter_); }

  double uniform() noexcept { return to_unit(next_u64()); }

  /// Standard normal via Box-Muller.
  double normal() noexcept {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = 0.0;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double th = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(th);
    has_spare_ = true;
    return r * std::cos(th);
  }

  /// Uniform integer in [0, n), n > 0.
  std::size_t below(std::size_t n) noexcept {
    const std::uint64_t bound = static_cast<std::uint64_t>(n);
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % bound;
    std::uint64_t x = 0;
    do {
      x = next_u64();
    } while (x >= limit);
    return static_cast<std::size_t>(x % bound);
  }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

/// Single uniform draw addressed by (seed, key...). Stateless.
inline double keyed_uniform(std::uint64_t seed, std::initializer_list<std::uint64_t> key) noexcept {
  return to_unit(mix64(hash_key(seed, key)));
}

}  // namespace lmk
