// Copyright 2026 The sffn Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdlib>
#include <numbers>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace sffn {

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Dense row-major matrix. Activations are stored one token per row.
template <typename T>
class Matrix {
 public:
  using value_type = T;

  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, T fill = T(0))
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  /// Checked construction: rejects wrong lengths and non-finite entries.
  static Matrix from(std::size_t rows, std::size_t cols, std::vector<T> data) {
    if (data.size() != rows * cols) {
      std::ostringstream os;
      os << "matrix data length " << data.size() << " does not match " << rows << "x" << cols;
      throw ShapeError(os.str());
    }
    for (std::size_t i = 0; i < data.size(); ++i) {
      if (!std::isfinite(static_cast<double>(data[i]))) {
        throw NumericError("non-finite matrix entry at flat index " + std::to_string(i));
      }
    }
    Matrix m;
    m.rows_ = rows;
    m.cols_ = cols;
    m.data_ = std::move(data);
    return m;
  }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = T(1);
    return m;
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  const T& operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<T> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const T> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::span<T> flat() { return data_; }
  std::span<const T> flat() const { return data_; }

  void fill(T value) { std::fill(data_.begin(), data_.end(), value); }

  /// Drops trailing rows without reallocating.
  void resize_rows(std::size_t rows) {
    rows_ = rows;
    data_.resize(rows * cols_);
  }

  Matrix transposed() const {
    Matrix t(cols_, rows_);
    for (std::size_t i = 0; i < rows_; ++i)
      for (std::size_t j = 0; j < cols_; ++j) t(j, i) = (*this)(i, j);
    return t;
  }

  template <typename U>
  Matrix<U> cast() const {
    Matrix<U> out(rows_, cols_);
    for (std::size_t i = 0; i < data_.size(); ++i) out.data()[i] = static_cast<U>(data_[i]);
    return out;
  }

  bool same_shape(const Matrix& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }
  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<T> data_;
};

inline std::string shape_str(std::size_t r, std::size_t c) {
  return "(" + std::to_string(r) + "x" + std::to_string(c) + ")";
}

template <typename T>
std::string shape_str(const Matrix<T>& m) {
  return shape_str(m.rows(), m.cols());
}

template <typename T>
T frobenius_norm(const Matrix<T>& m) {
  long double s = 0;
  for (T v : m.flat()) s += static_cast<long double>(v) * v;
  return static_cast<T>(std::sqrt(s));
}

template <typename T>
Matrix<T> subtract(const Matrix<T>& a, const Matrix<T>& b) {
  if (!a.same_shape(b)) throw ShapeError("subtract: " + shape_str(a) + " vs " + shape_str(b));
  Matrix<T> c(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.size(); ++i) c.data()[i] = a.data()[i] - b.data()[i];
  return c;
}

template <typename T>
T max_abs_diff(const Matrix<T>& a, const Matrix<T>& b) {
  if (!a.same_shape(b)) throw ShapeError("max_abs_diff: " + shape_str(a) + " vs " + shape_str(b));
  T m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
  return m;
}

// ---------------------------------------------------------------------------
// Random numbers

/// Counter-based SplitMix64 stream. Draw i depends only on (seed, i), so
/// streams are identical across platforms and can be split cheaply.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : seed_(seed) {}

  std::uint64_t seed() const { return seed_; }
  std::uint64_t counter() const { return counter_; }

  std::uint64_t next_u64() { return mix(seed_ + (++counter_) * 0x9E3779B97F4A7C15ULL); }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  /// Standard normal via Box-Muller; the second variate is discarded.
  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    if (u1 <= 0.0) u1 = 0x1.0p-53;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  std::uint64_t below(std::uint64_t n) { return n == 0 ? 0 : next_u64() % n; }

  /// Independent child stream keyed by `stream`.
  Rng split(std::uint64_t stream) const { return Rng(mix(seed_ ^ mix(stream + 0x632BE59BD9B4E019ULL))); }

 private:
  static std::uint64_t mix(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  std::uint64_t seed_;
  std::uint64_t counter_ = 0;
};

template <typename T>
Matrix<T> random_normal(std::size_t rows, std::size_t cols, Rng& rng, double stddev = 1.0) {
  Matrix<T> m(rows, cols);
  for (auto& v : m.flat()) v = static_cast<T>(stddev * rng.normal());
  return m;
}

// ---------------------------------------------------------------------------
// Threading and FLOP accounting

/// Kernel thread cap; reads SFFN_THREADS once, defaults to 1.
inline std::size_t& kernel_threads() {
  static std::size_t threads = [] {
    if (const char* env = std::getenv("SFFN_THREADS")) {
      long v = std::strtol(env, nullptr, 10);
      if (v > 0) return static_cast<std::size_t>(v);
    }
    return std::size_t{1};
  }();
  return threads;
}

/// Process-wide matmul FLOP counter (2 per multiply-add).
inline std::atomic<std::uint64_t>& flop_counter() {
  static std::atomic<std::uint64_t> counter{0};
  return counter;
}

inline void count_flops(std::uint64_t n) { flop_counter().fetch_add(n, std::memory_order_relaxed); }

/// Reports the FLOPs issued between construction and `elapsed()`.
class FlopScope {
 public:
  FlopScope() : start_(flop_counter().load()) {}
  std::uint64_t elapsed() const { return flop_counter().load() - start_; }

 private:
  std::uint64_t start_;
};

/// Splits [0, n) into contiguous chunks, one per worker. Each index is
/// processed by exactly one worker, so results do not depend on the split.
template <typename Fn>
void parallel_rows(std::size_t n, std::size_t work_per_row, Fn&& fn) {
  std::size_t threads = std::min(kernel_threads(), n);
  if (threads <= 1 || n * work_per_row < (1u << 18)) {
    fn(std::size_t{0}, n);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(threads - 1);
  std::size_t chunk = (n + threads - 1) / threads;
  for (std::size_t t = 1; t < threads; ++t) {
    std::size_t lo = t * chunk;
    std::size_t hi = std::min(n, lo + chunk);
    if (lo >= hi) break;
    pool.emplace_back([&fn, lo, hi] { fn(lo, hi); });
  }
  fn(std::size_t{0}, std::min(n, chunk));
  for (auto& th : pool) th.join();
}

// ---------------------------------------------------------------------------
// Matrix products. Every element is accumulated over k in increasing order,
// starting from zero, regardless of loop nesting or thread count.

/// c = a * b
template <typename T>
Matrix<T> matmul(const Matrix<T>& a, const Matrix<T>& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: inner dimensions differ, a" + shape_str(a) + " b" + shape_str(b));
  }
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  Matrix<T> c(m, n);
  count_flops(2ull * m * k * n);
  parallel_rows(m, k * n, [&](std::size_t lo, std::size_t hi) {
    for (std::size_t i = lo; i < hi; ++i) {
      T* ci = c.data() + i * n;
      const T* ai = a.data() + i * k;
      for (std::size_t p = 0; p < k; ++p) {
        const T aip = ai[p];
        const T* bp = b.data() + p * n;
        for (std::size_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
      }
    }
  });
  return c;
}

/// c += a^T * b  (a: k x m, b: k x n, c: m x n)
template <typename T>
void matmul_tn_accumulate(const Matrix<T>& a, const Matrix<T>& b, Matrix<T>& c) {
  if (a.rows() != b.rows() || c.rows() != a.cols() || c.cols() != b.cols()) {
    throw ShapeError("matmul_tn: a^T" + shape_str(a.cols(), a.rows()) + " b" + shape_str(b) + " c" +
                     shape_str(c));
  }
  const std::size_t k = a.rows(), m = a.cols(), n = b.cols();
  count_flops(2ull * m * k * n);
  parallel_rows(m, k * n, [&](std::size_t lo, std::size_t hi) {
    for (std::size_t p = 0; p < k; ++p) {
      const T* ap = a.data() + p * m;
      const T* bp = b.data() + p * n;
      for (std::size_t i = lo; i < hi; ++i) {
        const T api = ap[i];
        T* ci = c.data() + i * n;
        for (std::size_t j = 0; j < n; ++j) ci[j] += api * bp[j];
      }
    }
  });
}

template <typename T>
Matrix<T> matmul_tn(const Matrix<T>& a, const Matrix<T>& b) {
  Matrix<T> c(a.cols(), b.cols());
  matmul_tn_accumulate(a, b, c);
  return c;
}

/// c = a * b^T  (a: m x k, b: n x k)
template <typename T>
Matrix<T> matmul_nt(const Matrix<T>& a, const Matrix<T>& b) {
  if (a.cols() != b.cols()) {
    throw ShapeError("matmul_nt: a" + shape_str(a) + " b^T" + shape_str(b.cols(), b.rows()));
  }
  const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  Matrix<T> c(m, n);
  count_flops(2ull * m * k * n);
  parallel_rows(m, k * n, [&](std::size_t lo, std::size_t hi) {
    for (std::size_t i = lo; i < hi; ++i) {
      const T* ai = a.data() + i * k;
      for (std::size_t j = 0; j < n; ++j) {
        const T* bj = b.data() + j * k;
        T s = 0;
        for (std::size_t p = 0; p < k; ++p) s += ai[p] * bj[p];
        c(i, j) = s;
      }
    }
  });
  return c;
}

// ---------------------------------------------------------------------------
// GeLU

enum class GeluMode { Exact, Tanh };

template <typename T>
T gelu(T x, GeluMode mode = GeluMode::Exact) {
  if (mode == GeluMode::Tanh) {
    const T c = static_cast<T>(std::sqrt(2.0 / std::numbers::pi));
    return T(0.5) * x * (T(1) + std::tanh(c * (x + T(0.044715) * x * x * x)));
  }
  return T(0.5) * x * (T(1) + std::erf(x * static_cast<T>(std::numbers::sqrt2 / 2)));
}

/// d/dx of the exact form: Phi(x) + x * phi(x).
template <typename T>
T gelu_grad(T x) {
  const T cdf = T(0.5) * (T(1) + std::erf(x * static_cast<T>(std::numbers::sqrt2 / 2)));
  const T pdf = std::exp(T(-0.5) * x * x) * static_cast<T>(std::numbers::inv_sqrtpi / std::numbers::sqrt2);
  return cdf + x * pdf;
}

template <typename T>
std::vector<T> gelu(std::span<const T> x, GeluMode mode = GeluMode::Exact) {
  std::vector<T> y(x.size());
  std::transform(x.begin(), x.end(), y.begin(), [mode](T v) { return gelu(v, mode); });
  return y;
}

template <typename T>
Matrix<T> gelu(const Matrix<T>& x, GeluMode mode = GeluMode::Exact) {
  Matrix<T> y(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.size(); ++i) y.data()[i] = gelu(x.data()[i], mode);
  return y;
}

}  // namespace sffn
