#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <vector>

#include "fedopt/numerics.hpp"
#include "fedopt/random.hpp"

using namespace fedopt;

namespace {

ParamVector random_vector(RngStream& rng, std::size_t n, double lo = -3.0, double hi = 3.0) {
  ParamVector v(n);
  for (auto& x : v) x = rng.uniform(lo, hi);
  return v;
}

}  // namespace

TEST(Elementwise, AddSubMulMax) {
  EXPECT_EQ(elementwise({1, 2}, {3, 4}, ElementOp::Add), (ParamVector{4, 6}));
  EXPECT_EQ(elementwise({1, 2}, {3, 4}, ElementOp::Sub), (ParamVector{-2, -2}));
  EXPECT_EQ(elementwise({1, 5}, {3, 2}, ElementOp::Max), (ParamVector{3, 5}));
  const ParamVector x{0.25, -7.5, 3.0};
  EXPECT_EQ(elementwise(x, ParamVector::ones(3), ElementOp::Mul), x);
  EXPECT_EQ(elementwise({1, 6}, {4, 3}, ElementOp::Div), (ParamVector{0.25, 2}));
}

TEST(Elementwise, Errors) {
  EXPECT_THROW(elementwise({1, 2}, {1, 2, 3}, ElementOp::Add), StructuralError);
  EXPECT_THROW(elementwise({1, 2}, {1, 0}, ElementOp::Div), NumericError);
  const double big = std::numeric_limits<double>::max();
  EXPECT_THROW(elementwise({big}, {big}, ElementOp::Add), NumericError);
}

TEST(Elementwise, LengthPreservingForRandomLengths) {
  RngStream rng(11, 0);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 1 + rng.uniform_index(256);
    const auto a = random_vector(rng, n);
    const auto b = random_vector(rng, n, 0.5, 2.0);
    for (auto op : {ElementOp::Add, ElementOp::Sub, ElementOp::Mul, ElementOp::Div, ElementOp::Max}) {
      const auto r = elementwise(a, b, op);
      ASSERT_EQ(r.size(), n);
      ASSERT_TRUE(r.all_finite());
    }
    EXPECT_EQ(axpy(1.5, a, b).size(), n);
  }
}

TEST(Axpy, Examples) {
  const ParamVector x{1.5, -2.0, 4.0};
  const ParamVector y{0.5, 0.25, -1.0};
  EXPECT_EQ(axpy(0.0, x, y), y);
  EXPECT_EQ(axpy(1.0, x, ParamVector::zeros(3)), x);
  EXPECT_EQ(axpy(2.0, {1, 1}, {1, 2}), (ParamVector{3, 4}));
  EXPECT_THROW(axpy(1.0, {1, 2}, {1}), StructuralError);
}

TEST(Norms, Examples) {
  EXPECT_EQ(l2_norm_sq(ParamVector::zeros(5)), 0.0);
  EXPECT_EQ(l2_norm_sq(ParamVector{3, 4}), 25.0);
  EXPECT_EQ(l2_dist_sq(ParamVector{1, 1}, ParamVector{4, 5}), 25.0);
}

TEST(Norms, MatchesBruteForceDot) {
  RngStream rng(12, 0);
  for (int trial = 0; trial < 100; ++trial) {
    const auto x = random_vector(rng, 1 + rng.uniform_index(64));
    double brute = 0.0;
    for (double v : x) brute += v * v;
    EXPECT_NEAR(l2_norm_sq(x), brute, 1e-12 * (1.0 + brute));
    EXPECT_EQ(l2_norm_sq(x), dot(x, x));
  }
}

TEST(PairwiseSum, MatchesNaiveAndIsOrderFixed) {
  RngStream rng(13, 0);
  std::vector<ParamVector> terms;
  for (int i = 0; i < 37; ++i) terms.push_back(random_vector(rng, 8));
  const auto s = pairwise_sum(terms);
  for (std::size_t j = 0; j < 8; ++j) {
    double naive = 0.0;
    for (const auto& t : terms) naive += t[j];
    EXPECT_NEAR(s[j], naive, 1e-12);
  }
  EXPECT_EQ(pairwise_sum(terms), s);
  const auto m = pairwise_mean(terms);
  for (std::size_t j = 0; j < 8; ++j) EXPECT_EQ(m[j], s[j] / 37.0);
  EXPECT_THROW(pairwise_sum(std::vector<ParamVector>{}), StructuralError);
}
