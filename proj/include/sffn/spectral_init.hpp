// Copyright 2026 The sffn Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <string>

#include "sffn/numeric.hpp"
#include "sffn/svd.hpp"

namespace sffn {

/// w (M x N) ~= u (M x R) * v (R x N).
struct FactorPair {
  Matrix<double> u;
  Matrix<double> v;
  std::size_t rank() const { return u.cols(); }
};

/// Truncated-SVD factorization with the square root of each singular value
/// assigned to both factors, so ||u||_F == ||v||_F and u * v is the best
/// rank-r approximation of w in Frobenius norm.
inline FactorPair spectral_init(const Matrix<double>& w, std::size_t r) {
  const std::size_t k = std::min(w.rows(), w.cols());
  if (r < 1 || r > k) {
    throw std::invalid_argument("spectral_init: rank " + std::to_string(r) + " outside [1, " +
                                std::to_string(k) + "] for " + shape_str(w));
  }
  const SvdResult s = svd_thin(w);
  FactorPair out{Matrix<double>(w.rows(), r), Matrix<double>(r, w.cols())};
  for (std::size_t j = 0; j < r; ++j) {
    const double root = std::sqrt(s.sigma[j]);
    for (std::size_t i = 0; i < w.rows(); ++i) out.u(i, j) = s.u(i, j) * root;
    for (std::size_t i = 0; i < w.cols(); ++i) out.v(j, i) = root * s.vt(j, i);
  }
  return out;
}

}  // namespace sffn
