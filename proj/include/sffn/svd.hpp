// Copyright 2026 The sffn Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "sffn/numeric.hpp"

namespace sffn {

struct SvdResult {
  Matrix<double> u;            // M x K, orthonormal columns
  std::vector<double> sigma;   // K, non-increasing
  Matrix<double> vt;           // K x N, orthonormal rows
};

class SvdError : public NumericError {
 public:
  SvdError(const std::string& what, double off_diagonal)
      : NumericError(what), off_diagonal_(off_diagonal) {}
  double off_diagonal() const { return off_diagonal_; }

 private:
  double off_diagonal_;
};

struct SvdOptions {
  int max_sweeps = 100;
  double rotation_tol = 1e-15;
};

namespace detail {

// Column-major scratch: n columns of length m.
struct Columns {
  std::size_t m = 0, n = 0;
  std::vector<double> data;
  double* col(std::size_t j) { return data.data() + j * m; }
  const double* col(std::size_t j) const { return data.data() + j * m; }
};

inline double dot(const double* a, const double* b, std::size_t m) {
  double s = 0;
  for (std::size_t i = 0; i < m; ++i) s += a[i] * b[i];
  return s;
}

inline void rotate(double* a, double* b, std::size_t m, double c, double s) {
  for (std::size_t i = 0; i < m; ++i) {
    const double x = a[i], y = b[i];
    a[i] = c * x - s * y;
    b[i] = s * x + c * y;
  }
}

// Fills column j of `u` (length m) with a unit vector orthogonal to columns
// [0, j). Tries standard basis vectors with two Gram-Schmidt passes each.
inline void complete_basis(Columns& u, std::size_t j) {
  double* target = u.col(j);
  for (std::size_t e = 0; e < u.m; ++e) {
    std::fill(target, target + u.m, 0.0);
    target[e] = 1.0;
    for (int pass = 0; pass < 2; ++pass) {
      for (std::size_t p = 0; p < j; ++p) {
        const double* q = u.col(p);
        const double proj = dot(q, target, u.m);
        for (std::size_t i = 0; i < u.m; ++i) target[i] -= proj * q[i];
      }
    }
    const double norm = std::sqrt(dot(target, target, u.m));
    if (norm > 0.5) {
      for (std::size_t i = 0; i < u.m; ++i) target[i] /= norm;
      return;
    }
  }
  throw NumericError("svd: failed to complete orthonormal basis");
}

// One-sided Jacobi on a tall matrix (m >= n). Returns U (m x n), sigma, V (n x n).
inline SvdResult jacobi_tall(const Matrix<double>& w, const SvdOptions& opt) {
  const std::size_t m = w.rows(), n = w.cols();
  Columns a{m, n, std::vector<double>(m * n)};
  Columns v{n, n, std::vector<double>(n * n, 0.0)};
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) a.col(j)[i] = w(i, j);
  for (std::size_t j = 0; j < n; ++j) v.col(j)[j] = 1.0;

  const double norm_w = frobenius_norm(w);
  const double zero_floor = (1e-15 * norm_w) * (1e-15 * norm_w);
  // Below m * eps the computed inner products are rounding noise.
  const double tol = std::max(opt.rotation_tol, static_cast<double>(m) * 2.220446049250313e-16);

  double off = 0.0;
  bool converged = false;
  for (int sweep = 0; sweep < opt.max_sweeps && !converged; ++sweep) {
    off = 0.0;
    bool rotated = false;
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        double* ap = a.col(p);
        double* aq = a.col(q);
        const double alpha = dot(ap, ap, m);
        const double beta = dot(aq, aq, m);
        if (alpha <= zero_floor || beta <= zero_floor) continue;
        const double gamma = dot(ap, aq, m);
        const double rel = std::abs(gamma) / std::sqrt(alpha * beta);
        off = std::max(off, rel);
        if (rel <= tol) continue;
        rotated = true;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        rotate(ap, aq, m, c, s);
        rotate(v.col(p), v.col(q), n, c, s);
      }
    }
    converged = !rotated;
  }
  if (!converged) {
    throw SvdError("svd: no convergence after " + std::to_string(opt.max_sweeps) +
                       " sweeps, off-diagonal " + std::to_string(off),
                   off);
  }

  std::vector<double> norms(n);
  for (std::size_t j = 0; j < n; ++j) norms[j] = std::sqrt(dot(a.col(j), a.col(j), m));
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto x, auto y) { return norms[x] > norms[y]; });

  Columns u{m, n, std::vector<double>(m * n, 0.0)};
  SvdResult out;
  out.sigma.resize(n);
  std::vector<std::size_t> deficient;
  const double sigma_floor = 1e-15 * norm_w;
  for (std::size_t j = 0; j < n; ++j) {
    const std::size_t src = order[j];
    const double s = norms[src];
    if (s > sigma_floor) {
      out.sigma[j] = s;
      for (std::size_t i = 0; i < m; ++i) u.col(j)[i] = a.col(src)[i] / s;
    } else {
      out.sigma[j] = 0.0;
      deficient.push_back(j);
    }
  }
  // Zero singular values sort last, so earlier columns are already final.
  for (std::size_t j : deficient) complete_basis(u, j);

  out.u = Matrix<double>(m, n);
  out.vt = Matrix<double>(n, n);
  for (std::size_t j = 0; j < n; ++j) {
    for (std::size_t i = 0; i < m; ++i) out.u(i, j) = u.col(j)[i];
    const double* vj = v.col(order[j]);
    for (std::size_t i = 0; i < n; ++i) out.vt(j, i) = vj[i];
  }
  return out;
}

}  // namespace detail

/// Thin SVD by one-sided Jacobi: w = u * diag(sigma) * vt with K = min(M, N).
inline SvdResult svd_thin(const Matrix<double>& w, const SvdOptions& opt = {}) {
  if (w.rows() == 0 || w.cols() == 0) throw ShapeError("svd_thin: empty matrix " + shape_str(w));
  for (double x : w.flat()) {
    if (!std::isfinite(x)) throw NumericError("svd_thin: non-finite input");
  }
  if (w.rows() >= w.cols()) return detail::jacobi_tall(w, opt);
  SvdResult t = detail::jacobi_tall(w.transposed(), opt);
  return SvdResult{t.vt.transposed(), std::move(t.sigma), t.u.transposed()};
}

/// u * diag(sigma) * vt
inline Matrix<double> reconstruct(const SvdResult& s) {
  Matrix<double> us = s.u;
  for (std::size_t i = 0; i < us.rows(); ++i)
    for (std::size_t j = 0; j < us.cols(); ++j) us(i, j) *= s.sigma[j];
  return matmul(us, s.vt);
}

}  // namespace sffn
