#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string_view>

#include "spectralrank/matrix.hpp"

namespace spectralrank {

// Counter-based generator (Philox 4x32, 10 rounds). Chosen over <random>
// engines because runs must reproduce bit-for-bit and every generator draws
// from its own substream keyed by (seed, purpose tag): adding a generator, or
// reordering calls across generators, never perturbs the draws of another.
// The tag is hashed (FNV-1a 64) into the high counter words, so each
// (seed, tag) pair owns a disjoint 2^64 block of the counter space.
class Rng {
 public:
  Rng(std::uint64_t seed, std::string_view tag)
      : m_key0(static_cast<std::uint32_t>(seed)),
        m_key1(static_cast<std::uint32_t>(seed >> 32)) {
    const std::uint64_t h = fnv1a64(tag);
    m_ctr2 = static_cast<std::uint32_t>(h);
    m_ctr3 = static_cast<std::uint32_t>(h >> 32);
  }

  std::uint32_t next_u32() {
    if (m_have == 0) {
      refill();
    }
    return m_block[--m_have];
  }

  std::uint64_t next_u64() {
    const std::uint64_t hi = next_u32();
    return (hi << 32) | next_u32();
  }

  /// Uniform double in [0, 1), 53 random bits.
  double next_uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  /// Uniform double in [lo, hi).
  double next_uniform(double lo, double hi) { return lo + (hi - lo) * next_uniform(); }

  /// Unbiased integer in [0, n) by rejection.
  std::uint64_t next_below(std::uint64_t n) {
    // assert-style guard: n == 0 is a caller bug
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t v = next_u64();
    while (v >= limit) {
      v = next_u64();
    }
    return v % n;
  }

  /// Standard normal via Box-Muller; pairs are cached.
  double next_gaussian() {
    if (m_have_gauss) {
      m_have_gauss = false;
      return m_gauss;
    }
    // u1 in (0,1] so the log is finite
    const double u1 = 1.0 - next_uniform();
    const double u2 = next_uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 2.0 * std::numbers::pi * u2;
    m_gauss = r * std::sin(a);
    m_have_gauss = true;
    return r * std::cos(a);
  }

  /// rows x cols matrix of iid N(0, stddev^2) entries, filled row by row.
  Matrix gaussian(Eigen::Index rows, Eigen::Index cols, double stddev = 1.0) {
    Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i) {
      for (Eigen::Index j = 0; j < cols; ++j) {
        m(i, j) = stddev * next_gaussian();
      }
    }
    return m;
  }

  Vector gaussian_vector(Eigen::Index n, double stddev = 1.0) {
    Vector v(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      v(i) = stddev * next_gaussian();
    }
    return v;
  }

  static std::uint64_t fnv1a64(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const char c : s) {
      h ^= static_cast<unsigned char>(c);
      h *= 0x100000001b3ULL;
    }
    return h;
  }

 private:
  static void mulhilo(std::uint32_t a, std::uint32_t b, std::uint32_t& hi, std::uint32_t& lo) {
    const std::uint64_t p = static_cast<std::uint64_t>(a) * b;
    hi = static_cast<std::uint32_t>(p >> 32);
    lo = static_cast<std::uint32_t>(p);
  }

  void refill() {
    std::uint32_t c0 = static_cast<std::uint32_t>(m_block_index);
    std::uint32_t c1 = static_cast<std::uint32_t>(m_block_index >> 32);
    std::uint32_t c2 = m_ctr2;
    std::uint32_t c3 = m_ctr3;
    std::uint32_t k0 = m_key0;
    std::uint32_t k1 = m_key1;
    for (int round = 0; round < 10; ++round) {
      std::uint32_t hi0, lo0, hi1, lo1;
      mulhilo(0xD2511F53u, c0, hi0, lo0);
      mulhilo(0xCD9E8D57u, c2, hi1, lo1);
      const std::uint32_t n0 = hi1 ^ c1 ^ k0;
      const std::uint32_t n1 = lo1;
      const std::uint32_t n2 = hi0 ^ c3 ^ k1;
      const std::uint32_t n3 = lo0;
      c0 = n0;
      c1 = n1;
      c2 = n2;
      c3 = n3;
      k0 += 0x9E3779B9u;
      k1 += 0xBB67AE85u;
    }
    m_block[0] = c0;
    m_block[1] = c1;
    m_block[2] = c2;
    m_block[3] = c3;
    m_have = 4;
    ++m_block_index;
  }

  std::uint32_t m_key0, m_key1;
  std::uint32_t m_ctr2 = 0, m_ctr3 = 0;
  std::uint64_t m_block_index = 0;
  std::uint32_t m_block[4] = {0, 0, 0, 0};
  int m_have = 0;
  double m_gauss = 0.0;
  bool m_have_gauss = false;
};

}  // namespace spectralrank
