// Copyright 2026 The sffn Authors
// SPDX-License-Identifier: Apache-2.0

// Helpers shared by the unit tests and the acceptance runner.

#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "sffn/grad_check.hpp"
#include "sffn/model.hpp"

namespace sffn::testing {

inline std::vector<double> flatten(const Weights<double>& w) {
  std::vector<double> out;
  for_each_tensor(w, [&](const std::string&, const Matrix<double>& m) {
    out.insert(out.end(), m.flat().begin(), m.flat().end());
  });
  return out;
}

inline void assign(Weights<double>& w, const std::vector<double>& theta) {
  std::size_t at = 0;
  for_each_tensor(w, [&](const std::string&, Matrix<double>& m) {
    for (double& v : m.flat()) v = theta[at++];
  });
}

inline ModelConfig grad_check_config(bool low_rank) {
  ModelConfig c;
  c.width = 16;
  c.n_layers = 2;
  c.vocab = 17;
  c.seq_len = 16;
  c.n_heads = 2;
  if (low_rank) c.ffn = FfnSpec::low_rank(4);
  return c.resolved();
}

inline std::vector<std::vector<Token>> grad_check_batch() {
  return {{1, 4, 16, 2, 9, 9, 0, 13}, {5, 3, 3, 12, 7, 1}};
}

struct GradCheckReport {
  double max_rel_error = 0;
  std::size_t parameters = 0;
};

// Finite differences of the mean batch loss against loss_and_grad. A wider
// init than the training default keeps every gradient entry well above the
// central-difference noise floor.
inline GradCheckReport check_model_gradients(const ModelConfig& c, std::uint64_t seed = 3) {
  Rng rng(seed);
  TransformerLM<double> model = build_model(c, rng, InitOptions{0.3, false});
  // Perturb the norms so gain and bias gradients are generic.
  for (auto& b : model.weights.blocks) {
    for (auto* ln : {&b.ln_attn, &b.ln_ffn}) {
      for (double& g : ln->gain.flat()) g += 0.2 * rng.normal();
      for (double& v : ln->bias.flat()) v = 0.1 * rng.normal();
    }
  }
  for (double& v : model.weights.ln_final.bias.flat()) v = 0.1 * rng.normal();
  const auto batch = grad_check_batch();

  Weights<double> grad = zeros_like(model.weights);
  loss_and_grad(model, std::span<const std::vector<Token>>(batch), grad);
  const std::vector<double> analytic = flatten(grad);

  std::size_t targets = 0;
  for (const auto& s : batch) targets += s.size() - 1;
  TransformerLM<double> probe = model;
  auto f = [&](const std::vector<double>& theta) {
    assign(probe.weights, theta);
    double total = 0;
    for (const auto& s : batch) total += cross_entropy_sum(forward(probe, std::span<const Token>(s)), s);
    return total / static_cast<double>(targets);
  };
  GradCheckReport r;
  r.parameters = analytic.size();
  r.max_rel_error = grad_check(f, flatten(model.weights), analytic);
  return r;
}

// ---------------------------------------------------------------------------
// Independent multi-head attention: one head at a time, explicit rotation
// matrices, full score matrix with a causal mask.

inline Matrix<double> column_block(const Matrix<double>& m, std::size_t c0, std::size_t n) {
  Matrix<double> out(m.rows(), n);
  for (std::size_t r = 0; r < m.rows(); ++r)
    for (std::size_t c = 0; c < n; ++c) out(r, c) = m(r, c0 + c);
  return out;
}

inline void rotate_reference(Matrix<double>& x, double base) {
  const std::size_t hd = x.cols();
  for (std::size_t p = 0; p < x.rows(); ++p)
    for (std::size_t i = 0; i < hd / 2; ++i) {
      const double theta = static_cast<double>(p) / std::pow(base, 2.0 * i / hd);
      const double a = x(p, 2 * i), b = x(p, 2 * i + 1);
      x(p, 2 * i) = std::cos(theta) * a - std::sin(theta) * b;
      x(p, 2 * i + 1) = std::sin(theta) * a + std::cos(theta) * b;
    }
}

inline Matrix<double> mha_reference(const Attention<double>& w, const ModelConfig& c, const Matrix<double>& x) {
  const std::size_t n = x.rows(), hd = c.head_dim();
  const std::size_t group = c.n_heads / c.n_kv_heads();
  Matrix<double> concat(n, c.q_dim);
  for (std::size_t h = 0; h < c.n_heads; ++h) {
    Matrix<double> q = matmul(x, column_block(w.wq, h * hd, hd));
    Matrix<double> k = matmul(x, column_block(w.wk, (h / group) * hd, hd));
    const Matrix<double> v = matmul(x, column_block(w.wv, (h / group) * hd, hd));
    rotate_reference(q, c.rotary_base);
    rotate_reference(k, c.rotary_base);
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<double> s(i + 1);
      double mx = -1e300, z = 0;
      for (std::size_t j = 0; j <= i; ++j) {
        double dot = 0;
        for (std::size_t t = 0; t < hd; ++t) dot += q(i, t) * k(j, t);
        s[j] = dot / std::sqrt(static_cast<double>(hd));
        mx = std::max(mx, s[j]);
      }
      for (auto& e : s) z += (e = std::exp(e - mx));
      for (std::size_t t = 0; t < hd; ++t) {
        double acc = 0;
        for (std::size_t j = 0; j <= i; ++j) acc += s[j] / z * v(j, t);
        concat(i, h * hd + t) = acc;
      }
    }
  }
  return matmul(concat, w.wo);
}

}  // namespace sffn::testing
