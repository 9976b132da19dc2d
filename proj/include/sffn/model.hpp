// Copyright 2026 The sffn Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <type_traits>
#include <variant>
#include <vector>

#include "sffn/accounting.hpp"
#include "sffn/config.hpp"
#include "sffn/numeric.hpp"
#include "sffn/spectral_init.hpp"

namespace sffn {

using Token = std::uint32_t;

// ---------------------------------------------------------------------------
// Weights. Linear layers are stored (in x out) and applied as x * W, with
// one token per row of x.

template <typename T>
struct LayerNorm {
  Matrix<T> gain;  // 1 x d
  Matrix<T> bias;  // 1 x d
};

template <typename T>
struct Attention {
  Matrix<T> wq;  // d x q_dim
  Matrix<T> wk;  // d x kv_dim
  Matrix<T> wv;  // d x kv_dim
  Matrix<T> wo;  // q_dim x d
};

template <typename T>
struct DenseFfn {
  Matrix<T> w_up;    // d x inter
  Matrix<T> w_down;  // inter x d
};

// up ~= up_u * up_v and down ~= down_u * down_v, applied as two thin products.
template <typename T>
struct LowRankFfn {
  Matrix<T> up_u;    // d x R
  Matrix<T> up_v;    // R x inter
  Matrix<T> down_u;  // inter x R
  Matrix<T> down_v;  // R x d
};

template <typename T>
using Ffn = std::variant<DenseFfn<T>, LowRankFfn<T>>;

template <typename T>
struct Block {
  LayerNorm<T> ln_attn;
  Attention<T> attn;
  LayerNorm<T> ln_ffn;
  Ffn<T> ffn;
};

template <typename T>
struct Weights {
  Matrix<T> embedding;  // vocab x d, shared with the output head
  std::vector<Block<T>> blocks;
  LayerNorm<T> ln_final;  // empty when there are no blocks
};

/// Visits every tensor in declaration order as f(name, matrix).
template <typename W, typename F>
void for_each_tensor(W& w, F&& f) {
  f(std::string("embedding"), w.embedding);
  for (std::size_t l = 0; l < w.blocks.size(); ++l) {
    auto& b = w.blocks[l];
    const std::string p = "blocks." + std::to_string(l) + ".";
    f(p + "ln_attn.gain", b.ln_attn.gain);
    f(p + "ln_attn.bias", b.ln_attn.bias);
    f(p + "attn.wq", b.attn.wq);
    f(p + "attn.wk", b.attn.wk);
    f(p + "attn.wv", b.attn.wv);
    f(p + "attn.wo", b.attn.wo);
    f(p + "ln_ffn.gain", b.ln_ffn.gain);
    f(p + "ln_ffn.bias", b.ln_ffn.bias);
    std::visit(
        [&](auto& ffn) {
          if constexpr (requires { ffn.w_up; }) {
            f(p + "ffn.w_up", ffn.w_up);
            f(p + "ffn.w_down", ffn.w_down);
          } else {
            f(p + "ffn.up_u", ffn.up_u);
            f(p + "ffn.up_v", ffn.up_v);
            f(p + "ffn.down_u", ffn.down_u);
            f(p + "ffn.down_v", ffn.down_v);
          }
        },
        b.ffn);
  }
  if (!w.blocks.empty()) {
    f(std::string("ln_final.gain"), w.ln_final.gain);
    f(std::string("ln_final.bias"), w.ln_final.bias);
  }
}

template <typename T>
Weights<T> zeros_like(const Weights<T>& w) {
  Weights<T> z = w;
  for_each_tensor(z, [](const std::string&, Matrix<T>& m) { m.fill(T(0)); });
  return z;
}

template <typename T>
struct TransformerLM {
  ModelConfig config;
  Weights<T> weights;

  std::uint64_t parameter_count() const {
    std::uint64_t n = 0;
    for_each_tensor(weights, [&](const std::string&, const Matrix<T>& m) { n += m.size(); });
    return n;
  }

  template <typename U>
  TransformerLM<U> cast() const {
    TransformerLM<U> out;
    out.config = config;
    out.weights.embedding = weights.embedding.template cast<U>();
    auto cast_ln = [](const LayerNorm<T>& ln) { return LayerNorm<U>{ln.gain.template cast<U>(), ln.bias.template cast<U>()}; };
    for (const auto& b : weights.blocks) {
      Block<U> nb;
      nb.ln_attn = cast_ln(b.ln_attn);
      nb.attn = {b.attn.wq.template cast<U>(), b.attn.wk.template cast<U>(), b.attn.wv.template cast<U>(),
                 b.attn.wo.template cast<U>()};
      nb.ln_ffn = cast_ln(b.ln_ffn);
      if (const auto* d = std::get_if<DenseFfn<T>>(&b.ffn)) {
        nb.ffn = DenseFfn<U>{d->w_up.template cast<U>(), d->w_down.template cast<U>()};
      } else {
        const auto& r = std::get<LowRankFfn<T>>(b.ffn);
        nb.ffn = LowRankFfn<U>{r.up_u.template cast<U>(), r.up_v.template cast<U>(), r.down_u.template cast<U>(),
                               r.down_v.template cast<U>()};
      }
      out.weights.blocks.push_back(std::move(nb));
    }
    if (!weights.blocks.empty()) out.weights.ln_final = cast_ln(weights.ln_final);
    return out;
  }
};

// ---------------------------------------------------------------------------
// Construction

struct InitOptions {
  double stddev = 0.02;
  bool scale_residual_outputs = true;  // W_O and FFN down by 1/sqrt(2L)
};

namespace detail {

inline LayerNorm<double> unit_norm(std::size_t d) { return {Matrix<double>(1, d, 1.0), Matrix<double>(1, d, 0.0)}; }

inline LowRankFfn<double> factorize(const DenseFfn<double>& dense, std::size_t rank) {
  FactorPair up = spectral_init(dense.w_up, rank);
  FactorPair down = spectral_init(dense.w_down, rank);
  return {std::move(up.u), std::move(up.v), std::move(down.u), std::move(down.v)};
}

}  // namespace detail

/// Replaces FFN weights of every low-rank block (per `first_block_dense`)
/// by their rank-`rank` spectral factorization. Attention is untouched.
inline TransformerLM<double> factorize_model_ffns(const TransformerLM<double>& dense, std::size_t rank,
                                                  bool first_block_dense = true) {
  TransformerLM<double> out = dense;
  out.config.ffn = FfnSpec::low_rank(rank, first_block_dense);
  validate(out.config, /*allow_full_rank=*/true);
  for (std::size_t l = 0; l < out.weights.blocks.size(); ++l) {
    if (!out.config.block_is_low_rank(l)) continue;
    auto& slot = out.weights.blocks[l].ffn;
    const auto* d = std::get_if<DenseFfn<double>>(&slot);
    if (d == nullptr) throw ConfigError("factorize_model_ffns: block " + std::to_string(l) + " is not dense");
    slot = detail::factorize(*d, rank);
  }
  return out;
}

/// Draws dense weights ~ N(0, stddev); low-rank FFN factors come from the
/// spectral factorization of the dense draw, so dense and low-rank twins
/// built from the same seed share every other tensor.
inline TransformerLM<double> build_model(const ModelConfig& config, Rng& rng, const InitOptions& opt = {}) {
  const ModelConfig c = config.resolved();
  validate(c);
  ModelConfig dense_cfg = c;
  dense_cfg.ffn = FfnSpec::dense();

  TransformerLM<double> m;
  m.config = dense_cfg;
  const double sd = opt.stddev;
  const double out_sd =
      opt.scale_residual_outputs && c.n_layers > 0 ? sd / std::sqrt(2.0 * static_cast<double>(c.n_layers)) : sd;
  m.weights.embedding = random_normal<double>(c.vocab, c.width, rng, sd);
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    Block<double> b;
    b.ln_attn = detail::unit_norm(c.width);
    b.attn.wq = random_normal<double>(c.width, c.q_dim, rng, sd);
    b.attn.wk = random_normal<double>(c.width, c.kv_dim, rng, sd);
    b.attn.wv = random_normal<double>(c.width, c.kv_dim, rng, sd);
    b.attn.wo = random_normal<double>(c.q_dim, c.width, rng, out_sd);
    b.ln_ffn = detail::unit_norm(c.width);
    DenseFfn<double> ffn;
    ffn.w_up = random_normal<double>(c.width, c.intermediate, rng, sd);
    ffn.w_down = random_normal<double>(c.intermediate, c.width, rng, out_sd);
    b.ffn = std::move(ffn);
    m.weights.blocks.push_back(std::move(b));
  }
  if (c.n_layers > 0) m.weights.ln_final = detail::unit_norm(c.width);
  if (c.ffn.kind == FfnKind::LowRank) {
    m = factorize_model_ffns(m, c.ffn.rank, c.ffn.first_block_dense);
  }
  m.config = c;
  return m;
}

// ---------------------------------------------------------------------------
// Layer norm

constexpr double kNormEps = 1e-5;

template <typename T>
struct NormTrace {
  Matrix<T> xhat;
  std::vector<T> rstd;
};

template <typename T>
Matrix<T> layer_norm(const Matrix<T>& x, const LayerNorm<T>& ln, NormTrace<T>* trace = nullptr) {
  const std::size_t n = x.rows(), d = x.cols();
  if (ln.gain.cols() != d) throw ShapeError("layer_norm: input " + shape_str(x) + " gain " + shape_str(ln.gain));
  Matrix<T> y(n, d);
  if (trace) {
    trace->xhat = Matrix<T>(n, d);
    trace->rstd.assign(n, T(0));
  }
  for (std::size_t i = 0; i < n; ++i) {
    auto xi = x.row(i);
    T mean = 0;
    for (T v : xi) mean += v;
    mean /= static_cast<T>(d);
    T var = 0;
    for (T v : xi) var += (v - mean) * (v - mean);
    var /= static_cast<T>(d);
    const T rstd = T(1) / std::sqrt(var + static_cast<T>(kNormEps));
    for (std::size_t j = 0; j < d; ++j) {
      const T xh = (xi[j] - mean) * rstd;
      y(i, j) = xh * ln.gain(0, j) + ln.bias(0, j);
      if (trace) trace->xhat(i, j) = xh;
    }
    if (trace) trace->rstd[i] = rstd;
  }
  return y;
}

template <typename T>
Matrix<T> layer_norm_backward(const Matrix<T>& dy, const NormTrace<T>& tr, const LayerNorm<T>& ln,
                              LayerNorm<T>& grad) {
  const std::size_t n = dy.rows(), d = dy.cols();
  Matrix<T> dx(n, d);
  std::vector<T> dxhat(d);
  for (std::size_t i = 0; i < n; ++i) {
    T mean_dxhat = 0, mean_dxhat_xhat = 0;
    for (std::size_t j = 0; j < d; ++j) {
      const T g = dy(i, j);
      grad.gain(0, j) += g * tr.xhat(i, j);
      grad.bias(0, j) += g;
      dxhat[j] = g * ln.gain(0, j);
      mean_dxhat += dxhat[j];
      mean_dxhat_xhat += dxhat[j] * tr.xhat(i, j);
    }
    mean_dxhat /= static_cast<T>(d);
    mean_dxhat_xhat /= static_cast<T>(d);
    for (std::size_t j = 0; j < d; ++j) {
      dx(i, j) = tr.rstd[i] * (dxhat[j] - mean_dxhat - tr.xhat(i, j) * mean_dxhat_xhat);
    }
  }
  return dx;
}

// ---------------------------------------------------------------------------
// Rotary embedding: consecutive pairs (2i, 2i+1) of each head are rotated
// by pos * base^(-2i / head_dim).

template <typename T>
void apply_rotary(Matrix<T>& x, std::size_t head_dim, std::span<const std::size_t> positions, double base,
                  bool inverse = false) {
  if (head_dim % 2 != 0) throw ConfigError("rotary: head_dim must be even, got " + std::to_string(head_dim));
  if (x.cols() % head_dim != 0) throw ShapeError("rotary: width not a multiple of head_dim");
  if (positions.size() != x.rows()) throw ShapeError("rotary: one position per row required");
  const std::size_t heads = x.cols() / head_dim;
  const std::size_t half = head_dim / 2;
  for (std::size_t r = 0; r < x.rows(); ++r) {
    const double pos = static_cast<double>(positions[r]);
    for (std::size_t i = 0; i < half; ++i) {
      const double angle = pos * std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(head_dim));
      const T c = static_cast<T>(std::cos(angle));
      const T s = static_cast<T>(inverse ? -std::sin(angle) : std::sin(angle));
      for (std::size_t h = 0; h < heads; ++h) {
        T& a = x(r, h * head_dim + 2 * i);
        T& b = x(r, h * head_dim + 2 * i + 1);
        const T a0 = a, b0 = b;
        a = a0 * c - b0 * s;
        b = a0 * s + b0 * c;
      }
    }
  }
}

inline std::vector<std::size_t> position_range(std::size_t start, std::size_t n) {
  std::vector<std::size_t> p(n);
  std::iota(p.begin(), p.end(), start);
  return p;
}

/// Rotates query and key rows (one row per token, heads concatenated).
template <typename T>
std::pair<Matrix<T>, Matrix<T>> rotary_apply(Matrix<T> q, Matrix<T> k, std::span<const std::size_t> positions,
                                             std::size_t head_dim, double base = 10000.0) {
  apply_rotary(q, head_dim, positions, base);
  apply_rotary(k, head_dim, positions, base);
  return {std::move(q), std::move(k)};
}

// ---------------------------------------------------------------------------
// KV cache

template <typename T>
struct KvLayer {
  Matrix<T> keys;    // capacity x kv_dim, rotated
  Matrix<T> values;  // capacity x kv_dim
};

template <typename T>
class KVCache {
 public:
  KVCache() = default;
  KVCache(const ModelConfig& c) : KVCache(c.n_layers, c.seq_len, c.resolved().kv_dim) {}
  KVCache(std::size_t layers, std::size_t capacity, std::size_t kv_dim) : capacity_(capacity) {
    layers_.resize(layers, KvLayer<T>{Matrix<T>(capacity, kv_dim), Matrix<T>(capacity, kv_dim)});
  }

  std::size_t length() const { return length_; }
  std::size_t capacity() const { return capacity_; }
  KvLayer<T>& layer(std::size_t l) { return layers_[l]; }
  const KvLayer<T>& layer(std::size_t l) const { return layers_[l]; }
  std::size_t bytes() const { return layers_.size() * 2 * capacity_ * (layers_.empty() ? 0 : layers_[0].keys.cols()) * sizeof(T); }

  void reserve_append(std::size_t n) const {
    if (length_ + n > capacity_) {
      throw std::out_of_range("kv cache overflow: " + std::to_string(length_) + " + " + std::to_string(n) +
                              " > capacity " + std::to_string(capacity_));
    }
  }
  void advance(std::size_t n) { length_ += n; }
  void clear() { length_ = 0; }

 private:
  std::vector<KvLayer<T>> layers_;
  std::size_t capacity_ = 0;
  std::size_t length_ = 0;
};

// ---------------------------------------------------------------------------
// Attention

template <typename T>
struct AttentionTrace {
  Matrix<T> q;  // rotated, n x q_dim
  Matrix<T> k;  // rotated, n x kv_dim
  Matrix<T> v;
  std::vector<Matrix<T>> probs;  // per head, n x n (lower triangle)
  Matrix<T> context;             // n x q_dim, before W_O
};

namespace detail {

// Causal softmax attention of n query rows at positions start.. over
// key/value rows [0, start + i]. Query head h reads kv head h / group.
template <typename T>
void attend(const Matrix<T>& q, const Matrix<T>& keys, const Matrix<T>& values, std::size_t start,
            std::size_t head_dim, Matrix<T>& out, std::type_identity_t<std::vector<Matrix<T>>>* probs) {
  const std::size_t n = q.rows();
  const std::size_t heads = q.cols() / head_dim;
  const std::size_t kv_heads = keys.cols() / head_dim;
  const std::size_t group = heads / kv_heads;
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(head_dim)));
  if (probs) probs->assign(heads, Matrix<T>(n, start + n));
  std::vector<T> p(start + n);
  std::uint64_t flops = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t n_keys = start + i + 1;
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t g = h / group;
      const T* qi = q.data() + i * q.cols() + h * head_dim;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j < n_keys; ++j) {
        const T* kj = keys.data() + j * keys.cols() + g * head_dim;
        T s = 0;
        for (std::size_t t = 0; t < head_dim; ++t) s += qi[t] * kj[t];
        p[j] = s * scale;
        mx = std::max(mx, p[j]);
      }
      T sum = 0;
      for (std::size_t j = 0; j < n_keys; ++j) {
        p[j] = std::exp(p[j] - mx);
        sum += p[j];
      }
      T* oi = out.data() + i * out.cols() + h * head_dim;
      std::fill(oi, oi + head_dim, T(0));
      for (std::size_t j = 0; j < n_keys; ++j) {
        p[j] /= sum;
        const T* vj = values.data() + j * values.cols() + g * head_dim;
        for (std::size_t t = 0; t < head_dim; ++t) oi[t] += p[j] * vj[t];
      }
      if (probs) std::copy(p.begin(), p.begin() + n_keys, (*probs)[h].row(i).begin());
      flops += 4ull * n_keys * head_dim;
    }
  }
  count_flops(flops);
}

template <typename T>
void write_rows(Matrix<T>& dst, std::size_t at, const Matrix<T>& src) {
  std::copy(src.flat().begin(), src.flat().end(), dst.data() + at * dst.cols());
}

}  // namespace detail

/// Attention sublayer on normalized input rows `x` at positions
/// [cache.length(), cache.length() + n). New keys/values are appended to
/// `layer` of the cache; the caller advances the cache length once all
/// layers have run. Without a cache the rows form a fresh sequence.
template <typename T>
Matrix<T> attention_forward(const Attention<T>& w, const ModelConfig& c, const Matrix<T>& x,
                            std::type_identity_t<KvLayer<T>>* cache_layer, std::size_t start,
                            std::type_identity_t<AttentionTrace<T>>* trace = nullptr) {
  const std::size_t n = x.rows();
  const std::size_t hd = c.head_dim();
  Matrix<T> q = matmul(x, w.wq);
  Matrix<T> k = matmul(x, w.wk);
  Matrix<T> v = matmul(x, w.wv);
  const auto pos = position_range(start, n);
  apply_rotary(q, hd, pos, c.rotary_base);
  apply_rotary(k, hd, pos, c.rotary_base);

  KvLayer<T> local;
  KvLayer<T>* store = cache_layer;
  if (store == nullptr) {
    local = {k, v};
    store = &local;
    start = 0;
  } else {
    detail::write_rows(store->keys, start, k);
    detail::write_rows(store->values, start, v);
  }
  Matrix<T> context(n, c.q_dim);
  detail::attend(q, store->keys, store->values, start, hd, context, trace ? &trace->probs : nullptr);
  Matrix<T> out = matmul(context, w.wo);
  if (trace) {
    trace->q = std::move(q);
    trace->k = std::move(k);
    trace->v = std::move(v);
    trace->context = std::move(context);
  }
  return out;
}

/// Backward through attention_forward for a full sequence (start = 0).
/// Accumulates weight gradients and returns the gradient w.r.t. x.
template <typename T>
Matrix<T> attention_backward(const Matrix<T>& dout, const Matrix<T>& x, const AttentionTrace<T>& tr,
                             const Attention<T>& w, const ModelConfig& c, Attention<T>& grad) {
  const std::size_t n = dout.rows();
  const std::size_t hd = c.head_dim();
  const std::size_t heads = c.n_heads;
  const std::size_t group = heads / c.n_kv_heads();
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(hd)));

  matmul_tn_accumulate(tr.context, dout, grad.wo);
  const Matrix<T> dctx = matmul_nt(dout, w.wo);

  Matrix<T> dq(n, c.q_dim), dk(n, c.kv_dim), dv(n, c.kv_dim);
  std::vector<T> dp(n);
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t g = h / group;
    const Matrix<T>& P = tr.probs[h];
    for (std::size_t i = 0; i < n; ++i) {
      const T* doi = dctx.data() + i * c.q_dim + h * hd;
      T weighted = 0;
      for (std::size_t j = 0; j <= i; ++j) {
        const T* vj = tr.v.data() + j * c.kv_dim + g * hd;
        T s = 0;
        for (std::size_t t = 0; t < hd; ++t) s += doi[t] * vj[t];
        dp[j] = s;
        weighted += P(i, j) * s;
        T* dvj = dv.data() + j * c.kv_dim + g * hd;
        for (std::size_t t = 0; t < hd; ++t) dvj[t] += P(i, j) * doi[t];
      }
      const T* qi = tr.q.data() + i * c.q_dim + h * hd;
      T* dqi = dq.data() + i * c.q_dim + h * hd;
      for (std::size_t j = 0; j <= i; ++j) {
        const T ds = P(i, j) * (dp[j] - weighted) * scale;
        const T* kj = tr.k.data() + j * c.kv_dim + g * hd;
        T* dkj = dk.data() + j * c.kv_dim + g * hd;
        for (std::size_t t = 0; t < hd; ++t) {
          dqi[t] += ds * kj[t];
          dkj[t] += ds * qi[t];
        }
      }
    }
  }
  const auto pos = position_range(0, n);
  apply_rotary(dq, hd, pos, c.rotary_base, /*inverse=*/true);
  apply_rotary(dk, hd, pos, c.rotary_base, /*inverse=*/true);

  matmul_tn_accumulate(x, dq, grad.wq);
  matmul_tn_accumulate(x, dk, grad.wk);
  matmul_tn_accumulate(x, dv, grad.wv);
  Matrix<T> dx = matmul_nt(dq, w.wq);
  const Matrix<T> dxk = matmul_nt(dk, w.wk);
  const Matrix<T> dxv = matmul_nt(dv, w.wv);
  for (std::size_t i = 0; i < dx.size(); ++i) dx.data()[i] += dxk.data()[i] + dxv.data()[i];
  return dx;
}

// ---------------------------------------------------------------------------
// Feed-forward

template <typename T>
struct FfnTrace {
  Matrix<T> up_mid;    // n x R (low-rank only)
  Matrix<T> pre;       // n x inter
  Matrix<T> act;       // n x inter
  Matrix<T> down_mid;  // n x R (low-rank only)
};

template <typename T>
Matrix<T> ffn_forward(const Ffn<T>& ffn, const Matrix<T>& x, std::type_identity_t<FfnTrace<T>>* trace = nullptr,
                      GeluMode mode = GeluMode::Exact) {
  if (const auto* d = std::get_if<DenseFfn<T>>(&ffn)) {
    Matrix<T> pre = matmul(x, d->w_up);
    Matrix<T> act = gelu(pre, mode);
    Matrix<T> out = matmul(act, d->w_down);
    if (trace) {
      trace->pre = std::move(pre);
      trace->act = std::move(act);
    }
    return out;
  }
  const auto& r = std::get<LowRankFfn<T>>(ffn);
  Matrix<T> up_mid = matmul(x, r.up_u);
  Matrix<T> pre = matmul(up_mid, r.up_v);
  Matrix<T> act = gelu(pre, mode);
  Matrix<T> down_mid = matmul(act, r.down_u);
  Matrix<T> out = matmul(down_mid, r.down_v);
  if (trace) *trace = {std::move(up_mid), std::move(pre), std::move(act), std::move(down_mid)};
  return out;
}

template <typename T>
Matrix<T> ffn_backward(const Matrix<T>& dout, const Matrix<T>& x, const FfnTrace<T>& tr, const Ffn<T>& ffn,
                       Ffn<T>& grad) {
  auto gelu_back = [&](Matrix<T> dact) {
    for (std::size_t i = 0; i < dact.size(); ++i) dact.data()[i] *= gelu_grad(tr.pre.data()[i]);
    return dact;
  };
  if (const auto* d = std::get_if<DenseFfn<T>>(&ffn)) {
    auto& g = std::get<DenseFfn<T>>(grad);
    matmul_tn_accumulate(tr.act, dout, g.w_down);
    const Matrix<T> dpre = gelu_back(matmul_nt(dout, d->w_down));
    matmul_tn_accumulate(x, dpre, g.w_up);
    return matmul_nt(dpre, d->w_up);
  }
  const auto& r = std::get<LowRankFfn<T>>(ffn);
  auto& g = std::get<LowRankFfn<T>>(grad);
  matmul_tn_accumulate(tr.down_mid, dout, g.down_v);
  const Matrix<T> d_down_mid = matmul_nt(dout, r.down_v);
  matmul_tn_accumulate(tr.act, d_down_mid, g.down_u);
  const Matrix<T> dpre = gelu_back(matmul_nt(d_down_mid, r.down_u));
  matmul_tn_accumulate(tr.up_mid, dpre, g.up_v);
  const Matrix<T> d_up_mid = matmul_nt(dpre, r.up_v);
  matmul_tn_accumulate(x, d_up_mid, g.up_u);
  return matmul_nt(d_up_mid, r.up_u);
}

// ---------------------------------------------------------------------------
// Full model

template <typename T>
struct BlockTrace {
  Matrix<T> h_in;
  NormTrace<T> norm_attn;
  Matrix<T> attn_in;
  AttentionTrace<T> attn;
  NormTrace<T> norm_ffn;
  Matrix<T> ffn_in;
  FfnTrace<T> ffn;
};

/// Activations retained by a training forward pass.
template <typename T>
struct ForwardTrace {
  std::vector<Token> tokens;
  std::vector<BlockTrace<T>> blocks;
  NormTrace<T> norm_final;
  Matrix<T> final_hidden;  // normalized, input to the tied head
  Matrix<T> logits;
  bool valid = false;
};

template <typename T>
void check_tokens(const ModelConfig& c, std::span<const Token> tokens) {
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] >= c.vocab) {
      throw std::out_of_range("token id " + std::to_string(tokens[i]) + " at position " + std::to_string(i) +
                              " >= vocab " + std::to_string(c.vocab));
    }
  }
}

/// Runs the model on `tokens` placed at positions [start, start + n) and
/// returns n x vocab logits. With a cache, start = cache->length() and the
/// cache is extended; with a trace, activations for backward are kept.
template <typename T>
Matrix<T> forward(const TransformerLM<T>& model, std::span<const Token> tokens,
                  std::type_identity_t<KVCache<T>>* cache = nullptr,
                  std::type_identity_t<ForwardTrace<T>>* trace = nullptr) {
  const ModelConfig& c = model.config;
  const std::size_t n = tokens.size();
  check_tokens<T>(c, tokens);
  const std::size_t start = cache ? cache->length() : 0;
  if (cache) cache->reserve_append(n);
  if (start + n > c.seq_len) {
    throw std::out_of_range("sequence of " + std::to_string(start + n) + " positions exceeds seq_len " +
                            std::to_string(c.seq_len));
  }
  if (trace && cache) throw std::invalid_argument("forward: training traces are only kept without a cache");

  Matrix<T> h(n, c.width);
  for (std::size_t i = 0; i < n; ++i) {
    auto src = model.weights.embedding.row(tokens[i]);
    std::copy(src.begin(), src.end(), h.row(i).begin());
  }
  if (trace) {
    trace->tokens.assign(tokens.begin(), tokens.end());
    trace->blocks.assign(c.n_layers, BlockTrace<T>{});
    trace->valid = false;
  }
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const Block<T>& b = model.weights.blocks[l];
    BlockTrace<T>* bt = trace ? &trace->blocks[l] : nullptr;
    if (bt) bt->h_in = h;
    Matrix<T> a = layer_norm(h, b.ln_attn, bt ? &bt->norm_attn : nullptr);
    const Matrix<T> attn_out =
        attention_forward(b.attn, c, a, cache ? &cache->layer(l) : nullptr, start, bt ? &bt->attn : nullptr);
    for (std::size_t i = 0; i < h.size(); ++i) h.data()[i] += attn_out.data()[i];
    Matrix<T> f_in = layer_norm(h, b.ln_ffn, bt ? &bt->norm_ffn : nullptr);
    const Matrix<T> f_out = ffn_forward(b.ffn, f_in, bt ? &bt->ffn : nullptr);
    for (std::size_t i = 0; i < h.size(); ++i) h.data()[i] += f_out.data()[i];
    if (bt) {
      bt->attn_in = std::move(a);
      bt->ffn_in = std::move(f_in);
    }
  }
  Matrix<T> hf = c.n_layers > 0 ? layer_norm(h, model.weights.ln_final, trace ? &trace->norm_final : nullptr) : h;
  Matrix<T> logits = matmul_nt(hf, model.weights.embedding);
  if (cache) cache->advance(n);
  if (trace) {
    trace->final_hidden = std::move(hf);
    trace->logits = logits;
    trace->valid = true;
  }
  return logits;
}

/// Summed next-token cross-entropy (nats) of logits row i against
/// tokens[i + 1]; the last row has no target.
template <typename T>
double cross_entropy_sum(const Matrix<T>& logits, std::span<const Token> tokens) {
  double total = 0;
  for (std::size_t i = 0; i + 1 < tokens.size(); ++i) {
    auto row = logits.row(i);
    double mx = -std::numeric_limits<double>::infinity();
    for (T v : row) mx = std::max(mx, static_cast<double>(v));
    double sum = 0;
    for (T v : row) sum += std::exp(static_cast<double>(v) - mx);
    total += mx + std::log(sum) - static_cast<double>(row[tokens[i + 1]]);
  }
  return total;
}

template <typename T>
struct LmOutput {
  Matrix<T> logits;
  double loss = 0;  // mean next-token cross-entropy, nats
  std::size_t n_targets = 0;
  double perplexity() const { return std::exp(loss); }
};

template <typename T>
LmOutput<T> lm_forward(const TransformerLM<T>& model, std::span<const Token> tokens) {
  LmOutput<T> out;
  out.logits = forward(model, tokens);
  out.n_targets = tokens.empty() ? 0 : tokens.size() - 1;
  out.loss = out.n_targets == 0 ? 0.0 : cross_entropy_sum(out.logits, tokens) / static_cast<double>(out.n_targets);
  return out;
}

/// Reverse pass for one traced sequence. Adds `loss_scale` times the
/// gradient of the summed cross-entropy into `grad` (use 1 / n_targets of
/// the whole batch for a mean loss). Returns the summed cross-entropy.
template <typename T>
double backward(const TransformerLM<T>& model, const ForwardTrace<T>& trace, Weights<T>& grad, double loss_scale) {
  if (!trace.valid) throw std::logic_error("backward called without a traced forward pass");
  const ModelConfig& c = model.config;
  const auto& tokens = trace.tokens;
  const std::size_t n = tokens.size();
  const T scale = static_cast<T>(loss_scale);

  Matrix<T> dlogits(n, c.vocab);
  double loss = 0;
  for (std::size_t i = 0; i + 1 < n; ++i) {
    auto row = trace.logits.row(i);
    double mx = -std::numeric_limits<double>::infinity();
    for (T v : row) mx = std::max(mx, static_cast<double>(v));
    double sum = 0;
    for (T v : row) sum += std::exp(static_cast<double>(v) - mx);
    const double lse = mx + std::log(sum);
    loss += lse - static_cast<double>(row[tokens[i + 1]]);
    auto drow = dlogits.row(i);
    for (std::size_t j = 0; j < c.vocab; ++j) drow[j] = static_cast<T>(std::exp(static_cast<double>(row[j]) - lse)) * scale;
    drow[tokens[i + 1]] -= scale;
  }

  matmul_tn_accumulate(dlogits, trace.final_hidden, grad.embedding);
  Matrix<T> dh = matmul(dlogits, model.weights.embedding);
  if (c.n_layers > 0) dh = layer_norm_backward(dh, trace.norm_final, model.weights.ln_final, grad.ln_final);

  for (std::size_t l = c.n_layers; l-- > 0;) {
    const Block<T>& b = model.weights.blocks[l];
    Block<T>& gb = grad.blocks[l];
    const BlockTrace<T>& bt = trace.blocks[l];
    const Matrix<T> dffn_in = ffn_backward(dh, bt.ffn_in, bt.ffn, b.ffn, gb.ffn);
    const Matrix<T> dh_mid = layer_norm_backward(dffn_in, bt.norm_ffn, b.ln_ffn, gb.ln_ffn);
    for (std::size_t i = 0; i < dh.size(); ++i) dh.data()[i] += dh_mid.data()[i];
    const Matrix<T> dattn_in = attention_backward(dh, bt.attn_in, bt.attn, b.attn, c, gb.attn);
    const Matrix<T> dh_in = layer_norm_backward(dattn_in, bt.norm_attn, b.ln_attn, gb.ln_attn);
    for (std::size_t i = 0; i < dh.size(); ++i) dh.data()[i] += dh_in.data()[i];
  }
  for (std::size_t i = 0; i < n; ++i) {
    auto g = grad.embedding.row(tokens[i]);
    auto d = dh.row(i);
    for (std::size_t j = 0; j < c.width; ++j) g[j] += d[j];
  }
  return loss;
}

/// Mean next-token loss over a batch of sequences, with its gradient
/// accumulated into `grad`.
template <typename T>
double loss_and_grad(const TransformerLM<T>& model, std::span<const std::vector<Token>> batch, Weights<T>& grad,
                     std::size_t total_targets = 0) {
  if (total_targets == 0) {
    for (const auto& s : batch) total_targets += s.empty() ? 0 : s.size() - 1;
  }
  if (total_targets == 0) return 0.0;
  const double inv = 1.0 / static_cast<double>(total_targets);
  double sum = 0;
  ForwardTrace<T> trace;
  for (const auto& seq : batch) {
    forward(model, std::span<const Token>(seq), nullptr, &trace);
    sum += backward(model, trace, grad, inv);
  }
  return sum * inv;
}

// ---------------------------------------------------------------------------
// Incremental decoding

template <typename T>
std::vector<double> softmax(std::span<const T> logits) {
  std::vector<double> p(logits.size());
  double mx = -std::numeric_limits<double>::infinity();
  for (T v : logits) mx = std::max(mx, static_cast<double>(v));
  double sum = 0;
  for (std::size_t i = 0; i < p.size(); ++i) sum += (p[i] = std::exp(static_cast<double>(logits[i]) - mx));
  for (auto& v : p) v /= sum;
  return p;
}

template <typename T>
struct DecodeOutput {
  std::vector<T> logits;
  std::vector<double> probabilities;
};

/// One-token forward against the cache; selection is left to the caller.
template <typename T>
DecodeOutput<T> decode_step(const TransformerLM<T>& model, KVCache<T>& cache, Token last_token) {
  const Token tok[1] = {last_token};
  Matrix<T> logits = forward(model, std::span<const Token>(tok, 1), &cache);
  DecodeOutput<T> out;
  out.logits.assign(logits.flat().begin(), logits.flat().end());
  out.probabilities = softmax<T>(out.logits);
  return out;
}

/// One decode step for B independent sequences. Projections run as a single
/// B-row product; attention reads each sequence's own cache.
template <typename T>
Matrix<T> decode_batch(const TransformerLM<T>& model, std::span<KVCache<T>> caches, std::span<const Token> tokens) {
  const ModelConfig& c = model.config;
  const std::size_t B = tokens.size();
  if (caches.size() != B) throw ShapeError("decode_batch: one cache per sequence required");
  check_tokens<T>(c, tokens);
  for (auto& kv : caches) kv.reserve_append(1);
  const std::size_t hd = c.head_dim();

  Matrix<T> h(B, c.width);
  for (std::size_t i = 0; i < B; ++i) {
    auto src = model.weights.embedding.row(tokens[i]);
    std::copy(src.begin(), src.end(), h.row(i).begin());
  }
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const Block<T>& b = model.weights.blocks[l];
    const Matrix<T> a = layer_norm(h, b.ln_attn);
    Matrix<T> q = matmul(a, b.attn.wq);
    Matrix<T> k = matmul(a, b.attn.wk);
    const Matrix<T> v = matmul(a, b.attn.wv);
    std::vector<std::size_t> pos(B);
    for (std::size_t i = 0; i < B; ++i) pos[i] = caches[i].length();
    apply_rotary(q, hd, pos, c.rotary_base);
    apply_rotary(k, hd, pos, c.rotary_base);
    Matrix<T> context(B, c.q_dim);
    Matrix<T> qi(1, c.q_dim), ci(1, c.q_dim);
    for (std::size_t i = 0; i < B; ++i) {
      KvLayer<T>& store = caches[i].layer(l);
      std::copy(k.row(i).begin(), k.row(i).end(), store.keys.row(pos[i]).begin());
      std::copy(v.row(i).begin(), v.row(i).end(), store.values.row(pos[i]).begin());
      std::copy(q.row(i).begin(), q.row(i).end(), qi.row(0).begin());
      detail::attend(qi, store.keys, store.values, pos[i], hd, ci, nullptr);
      std::copy(ci.row(0).begin(), ci.row(0).end(), context.row(i).begin());
    }
    const Matrix<T> attn_out = matmul(context, b.attn.wo);
    for (std::size_t i = 0; i < h.size(); ++i) h.data()[i] += attn_out.data()[i];
    const Matrix<T> f_out = ffn_forward(b.ffn, layer_norm(h, b.ln_ffn));
    for (std::size_t i = 0; i < h.size(); ++i) h.data()[i] += f_out.data()[i];
  }
  const Matrix<T> hf = c.n_layers > 0 ? layer_norm(h, model.weights.ln_final) : h;
  for (auto& kv : caches) kv.advance(1);
  return matmul_nt(hf, model.weights.embedding);
}

}  // namespace sffn
