#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "gne/rng.hpp"

using namespace gne;

TEST(Rng, SameSeedSameSequence) {
  RngStream a(42), b(42);
  for (int i = 0; i < 1000; ++i) ASSERT_EQ(a.next_u64(), b.next_u64());
}

TEST(Rng, StateTripleResumesSequence) {
  RngStream a(9, 3);
  for (int i = 0; i < 37; ++i) a.next_u64();
  RngStream b(a.seed(), a.stream(), a.counter());
  for (int i = 0; i < 100; ++i) ASSERT_EQ(a.next_u64(), b.next_u64());
}

TEST(Rng, StreamsDoNotOverlap) {
  std::set<std::uint64_t> seen;
  for (std::uint64_t stream = 0; stream < 16; ++stream) {
    RngStream r(1234, stream);
    for (int i = 0; i < 4096; ++i) ASSERT_TRUE(seen.insert(r.next_u64()).second);
  }
}

TEST(Gaussian, ZeroSigmaIsExactlyZero) {
  RngStream rng(1);
  const Matrix g = gaussian(rng, 3, 2, 0.0);
  EXPECT_EQ(g, Matrix::zeros(3, 2));
}

TEST(Gaussian, NegativeSigmaIsDomainError) {
  RngStream rng(1);
  EXPECT_THROW(gaussian(rng, 1, 1, -0.1), DomainError);
}

TEST(Gaussian, MomentsMatch) {
  RngStream rng(2024);
  const double sigma = 0.1;
  const std::size_t n = 1000000;
  const Matrix g = gaussian(rng, n, 1, sigma);
  double mean = 0;
  for (double v : g.values()) mean += v;
  mean /= n;
  double var = 0;
  for (double v : g.values()) var += (v - mean) * (v - mean);
  var /= (n - 1);
  EXPECT_LT(std::abs(mean), 4 * sigma / std::sqrt(double(n)));
  EXPECT_NEAR(var, sigma * sigma, 0.02 * sigma * sigma);
}

TEST(UniformInit, SupportMeanAndDeterminism) {
  RngStream rng(77);
  const double h = 0.5;
  const Matrix u = uniform_init(rng, 1000, 1000, h);
  double mean = 0;
  for (double v : u.values()) {
    ASSERT_GT(v, -h);
    ASSERT_LT(v, h);
    mean += v;
  }
  mean /= u.size();
  EXPECT_LT(std::abs(mean), 0.002);

  RngStream a(5), b(5);
  EXPECT_EQ(uniform_init(a, 4, 3, 0.1), uniform_init(b, 4, 3, 0.1));
}

TEST(UniformInit, NonPositiveHalfWidthIsDomainError) {
  RngStream rng(1);
  EXPECT_THROW(uniform_init(rng, 1, 1, 0.0), DomainError);
  EXPECT_THROW(uniform_init(rng, 1, 1, -1.0), DomainError);
}

TEST(Permutation, IsAPermutation) {
  RngStream rng(3);
  for (std::size_t n : {0u, 1u, 2u, 17u, 1000u}) {
    auto p = permutation(rng, n);
    std::set<std::size_t> s(p.begin(), p.end());
    EXPECT_EQ(s.size(), n);
    if (n) EXPECT_EQ(*s.rbegin(), n - 1);
  }
}
