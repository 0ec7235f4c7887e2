#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <numeric>
#include <vector>

#include "gne/errors.hpp"
#include "gne/matrix.hpp"

namespace gne {

namespace detail {

// SplitMix64 finaliser (Stafford variant 13).
constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ULL;

} // namespace detail

/// Counter-based deterministic generator. The whole state is (seed, stream,
/// counter); output n is mix64(key + n·golden) with a key derived from
/// (seed, stream). Nothing is cached between calls, so saving the three
/// integers is enough to resume a sequence bit-exactly.
///
/// Gaussian draws use the cosine branch of Box–Muller and consume exactly two
/// uniforms each.
class RngStream {
public:
  RngStream() = default;
  explicit RngStream(std::uint64_t seed, std::uint64_t stream = 0, std::uint64_t counter = 0)
      : seed_(seed), stream_(stream), counter_(counter) {}

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t stream() const noexcept { return stream_; }
  std::uint64_t counter() const noexcept { return counter_; }

  /// An independent stream sharing this seed.
  RngStream split(std::uint64_t stream_id) const { return RngStream(seed_, stream_id); }

  std::uint64_t next_u64() noexcept {
    return detail::mix64(key() + (counter_++) * detail::kGolden);
  }

  /// Uniform on the open interval (0, 1).
  double next_unit() noexcept {
    return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53;
  }

  /// Uniform integer in [0, n); rejection sampling keeps it exactly unbiased.
  std::uint64_t next_below(std::uint64_t n) {
    if (n == 0) throw DomainError("next_below: n must be positive");
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x;
    do {
      x = next_u64();
    } while (x >= limit);
    return x % n;
  }

  double next_gaussian() noexcept {
    const double u1 = next_unit();
    const double u2 = next_unit();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  friend bool operator==(const RngStream&, const RngStream&) = default;

private:
  std::uint64_t key() const noexcept {
    return detail::mix64(seed_ ^ detail::mix64(stream_ + detail::kGolden));
  }

  std::uint64_t seed_ = 0;
  std::uint64_t stream_ = 0;
  std::uint64_t counter_ = 0;
};

/// i.i.d. N(0, sigma²). sigma == 0 yields exact zeros and consumes no draws.
inline Matrix gaussian(RngStream& rng, std::size_t rows, std::size_t cols, double sigma) {
  if (!(sigma >= 0.0) || !std::isfinite(sigma)) {
    throw DomainError("gaussian: sigma must be finite and >= 0, got " + std::to_string(sigma));
  }
  Matrix out(rows, cols);
  if (sigma == 0.0) return out;
  for (double& v : out.values()) v = sigma * rng.next_gaussian();
  return out;
}

/// i.i.d. Uniform(-half_width, +half_width).
inline Matrix uniform_init(RngStream& rng, std::size_t rows, std::size_t cols, double half_width) {
  if (!(half_width > 0.0) || !std::isfinite(half_width)) {
    throw DomainError("uniform_init: half_width must be finite and > 0, got " +
                      std::to_string(half_width));
  }
  Matrix out(rows, cols);
  for (double& v : out.values()) v = half_width * (2.0 * rng.next_unit() - 1.0);
  return out;
}

/// Fisher–Yates permutation of [0, n).
inline std::vector<std::size_t> permutation(RngStream& rng, std::size_t n) {
  std::vector<std::size_t> p(n);
  std::iota(p.begin(), p.end(), std::size_t{0});
  for (std::size_t i = n; i > 1; --i) {
    const auto j = static_cast<std::size_t>(rng.next_below(i));
    std::swap(p[i - 1], p[j]);
  }
  return p;
}

} // namespace gne
