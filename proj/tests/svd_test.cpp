// Copyright 2026 The sffn Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>

#include "sffn/svd.hpp"

namespace sffn {
namespace {

Eigen::MatrixXd to_eigen(const Matrix<double>& m) {
  Eigen::MatrixXd e(m.rows(), m.cols());
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) e(i, j) = m(i, j);
  return e;
}

// Singular values from the eigenvalues of the smaller Gram matrix.
std::vector<double> eigen_oracle_sigma(const Matrix<double>& w) {
  const Eigen::MatrixXd a = to_eigen(w);
  const Eigen::MatrixXd g = a.rows() >= a.cols() ? Eigen::MatrixXd(a.transpose() * a) : Eigen::MatrixXd(a * a.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(g);
  std::vector<double> s;
  for (Eigen::Index i = 0; i < es.eigenvalues().size(); ++i) s.push_back(std::sqrt(std::max(0.0, es.eigenvalues()(i))));
  std::sort(s.rbegin(), s.rend());
  return s;
}

double orthonormality_error(const Matrix<double>& q, bool columns) {
  const Matrix<double> g = columns ? matmul_tn(q, q) : matmul_nt(q, q);
  double worst = 0;
  for (std::size_t i = 0; i < g.rows(); ++i)
    for (std::size_t j = 0; j < g.cols(); ++j) worst = std::max(worst, std::abs(g(i, j) - (i == j ? 1.0 : 0.0)));
  return worst;
}

void expect_invariants(const Matrix<double>& w, const SvdResult& s) {
  const std::size_t k = std::min(w.rows(), w.cols());
  ASSERT_EQ(s.u.rows(), w.rows());
  ASSERT_EQ(s.u.cols(), k);
  ASSERT_EQ(s.vt.rows(), k);
  ASSERT_EQ(s.vt.cols(), w.cols());
  ASSERT_EQ(s.sigma.size(), k);
  for (std::size_t i = 0; i < k; ++i) {
    EXPECT_GE(s.sigma[i], 0.0);
    if (i > 0) {
      EXPECT_LE(s.sigma[i], s.sigma[i - 1]);
    }
  }
  EXPECT_LT(orthonormality_error(s.u, true), 1e-10);
  EXPECT_LT(orthonormality_error(s.vt, false), 1e-10);
  const double norm = frobenius_norm(w);
  EXPECT_LE(frobenius_norm(subtract(reconstruct(s), w)), 1e-8 * std::max(norm, 1e-300));
}

TEST(Svd, DiagonalMatrix) {
  const auto w = Matrix<double>::from(3, 3, {3, 0, 0, 0, 2, 0, 0, 0, 1});
  const SvdResult s = svd_thin(w);
  EXPECT_NEAR(s.sigma[0], 3.0, 1e-14);
  EXPECT_NEAR(s.sigma[1], 2.0, 1e-14);
  EXPECT_NEAR(s.sigma[2], 1.0, 1e-14);
  expect_invariants(w, s);
}

TEST(Svd, UnsortedDiagonalComesOutSorted) {
  const auto w = Matrix<double>::from(3, 3, {1, 0, 0, 0, 3, 0, 0, 0, 2});
  const SvdResult s = svd_thin(w);
  EXPECT_NEAR(s.sigma[0], 3.0, 1e-14);
  EXPECT_NEAR(s.sigma[2], 1.0, 1e-14);
  expect_invariants(w, s);
}

TEST(Svd, RankOneOuterProduct) {
  Rng rng(2);
  const auto u = random_normal<double>(8, 1, rng);
  const auto v = random_normal<double>(1, 6, rng);
  const auto w = matmul(u, v);
  const SvdResult s = svd_thin(w);
  EXPECT_NEAR(s.sigma[0], frobenius_norm(u) * frobenius_norm(v), 1e-12);
  for (std::size_t i = 1; i < s.sigma.size(); ++i) EXPECT_LT(s.sigma[i], 1e-12);
  expect_invariants(w, s);
}

TEST(Svd, RandomMatchesEigensolverOracle) {
  Rng rng(8);
  const auto w = random_normal<double>(8, 6, rng);
  const SvdResult s = svd_thin(w);
  const auto oracle = eigen_oracle_sigma(w);
  for (std::size_t i = 0; i < 6; ++i) EXPECT_NEAR(s.sigma[i], oracle[i], 1e-9) << i;
  expect_invariants(w, s);
}

TEST(Svd, WideMatrixUsesTranspose) {
  Rng rng(10);
  const auto w = random_normal<double>(5, 12, rng);
  const SvdResult s = svd_thin(w);
  const auto oracle = eigen_oracle_sigma(w);
  for (std::size_t i = 0; i < 5; ++i) EXPECT_NEAR(s.sigma[i], oracle[i], 1e-9) << i;
  expect_invariants(w, s);
}

TEST(Svd, ZeroMatrixHasOrthonormalFactors) {
  const Matrix<double> w(4, 3);
  const SvdResult s = svd_thin(w);
  for (double x : s.sigma) EXPECT_EQ(x, 0.0);
  EXPECT_LT(orthonormality_error(s.u, true), 1e-10);
  EXPECT_LT(orthonormality_error(s.vt, false), 1e-10);
}

TEST(Svd, RankDeficientCompletesBasis) {
  Rng rng(13);
  const auto w = matmul(random_normal<double>(10, 3, rng), random_normal<double>(3, 7, rng));
  const SvdResult s = svd_thin(w);
  for (std::size_t i = 3; i < 7; ++i) EXPECT_LT(s.sigma[i], 1e-10 * s.sigma[0]);
  expect_invariants(w, s);
}

TEST(Svd, SingleRowAndColumn) {
  const auto row = Matrix<double>::from(1, 4, {1, 2, 2, 0});
  expect_invariants(row, svd_thin(row));
  EXPECT_NEAR(svd_thin(row).sigma[0], 3.0, 1e-14);
  const auto col = row.transposed();
  EXPECT_NEAR(svd_thin(col).sigma[0], 3.0, 1e-14);
}

TEST(Svd, ReconstructionUpTo256x512) {
  Rng rng(17);
  for (auto [m, n] : {std::pair{32, 64}, std::pair{128, 96}, std::pair{256, 512}}) {
    const auto w = random_normal<double>(m, n, rng);
    expect_invariants(w, svd_thin(w));
  }
}

TEST(Svd, RejectsEmptyAndNonFinite) {
  EXPECT_THROW(svd_thin(Matrix<double>(0, 3)), std::invalid_argument);
  Matrix<double> w(2, 2);
  w(0, 0) = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(svd_thin(w), NumericError);
}

TEST(Svd, SweepCapReportsOffDiagonal) {
  Rng rng(19);
  const auto w = random_normal<double>(20, 20, rng);
  SvdOptions opt;
  opt.max_sweeps = 1;
  try {
    svd_thin(w, opt);
    FAIL() << "expected SvdError";
  } catch (const SvdError& e) {
    EXPECT_GT(e.off_diagonal(), 0.0);
  }
}

}  // namespace
}  // namespace sffn
