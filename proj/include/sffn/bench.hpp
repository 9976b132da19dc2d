// Copyright 2026 The sffn Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <cstdio>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "sffn/accounting.hpp"
#include "sffn/model.hpp"

namespace sffn {

struct BenchResult {
  std::string label;
  std::size_t width = 0;
  std::string variant;
  std::uint64_t n_tokens = 0;
  double median_s = 0;
  double min_s = 0;
  double max_s = 0;
  double tokens_per_s = 0;  // n_tokens / median_s
  std::uint64_t flops = 0;  // counted during one repetition
  std::size_t reps = 0;
};

struct BenchOptions {
  std::size_t reps = 5;
  std::size_t warmups = 2;
};

inline void write_bench_csv(std::ostream& os, const std::vector<BenchResult>& rows, bool header = true) {
  if (header) os << "label,width,variant,n_tokens,median_s,min_s,max_s,tokens_per_s,flops\n";
  char buf[512];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%s,%zu,%s,%llu,%.9g,%.9g,%.9g,%.9g,%llu\n", r.label.c_str(), r.width,
                  r.variant.c_str(), static_cast<unsigned long long>(r.n_tokens), r.median_s, r.min_s, r.max_s,
                  r.tokens_per_s, static_cast<unsigned long long>(r.flops));
    os << buf;
  }
}

namespace detail {

// Times `body` after `setup` on every repetition; warmups are discarded.
// Records the FLOPs of the last repetition.
template <typename Setup, typename Body>
BenchResult time_reps(const BenchOptions& opt, Setup&& setup, Body&& body) {
  if (opt.reps < 5) throw std::invalid_argument("benchmarks need at least 5 repetitions");
  for (std::size_t i = 0; i < opt.warmups; ++i) {
    setup();
    body();
  }
  std::vector<double> secs;
  BenchResult r;
  for (std::size_t i = 0; i < opt.reps; ++i) {
    setup();
    FlopScope flops;
    const auto t0 = std::chrono::steady_clock::now();
    body();
    const auto t1 = std::chrono::steady_clock::now();
    r.flops = flops.elapsed();
    secs.push_back(std::chrono::duration<double>(t1 - t0).count());
  }
  std::sort(secs.begin(), secs.end());
  r.min_s = secs.front();
  r.max_s = secs.back();
  const std::size_t n = secs.size();
  r.median_s = n % 2 ? secs[n / 2] : 0.5 * (secs[n / 2 - 1] + secs[n / 2]);
  r.reps = n;
  return r;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// FFN width sweep

struct FfnVariant {
  std::string name;
  FfnKind kind = FfnKind::Dense;
  std::size_t rank_divisor = 0;  // rank = width / rank_divisor

  std::size_t rank(std::size_t width) const { return kind == FfnKind::Dense ? 0 : width / rank_divisor; }
};

/// Dense, rank d/2 (62.5% of the parameters) and rank d/4 (31.25%).
inline std::vector<FfnVariant> default_ffn_variants() {
  return {{"dense", FfnKind::Dense, 0}, {"lowrank-0.625", FfnKind::LowRank, 2}, {"lowrank-0.3125", FfnKind::LowRank, 4}};
}

struct FfnBenchOptions {
  std::size_t n_tokens = 30000;
  std::size_t seq_len = 1024;  // rows per forward call
  GeluMode gelu = GeluMode::Exact;
  BenchOptions timing;
  std::uint64_t seed = 1;
};

/// Median forward latency of one FFN block (width d, intermediate 4d) over
/// n_tokens rows, in 32-bit floats.
inline std::vector<BenchResult> bench_ffn(const std::vector<std::size_t>& widths,
                                          const std::vector<FfnVariant>& variants = default_ffn_variants(),
                                          const FfnBenchOptions& opt = {}) {
  std::vector<BenchResult> out;
  Rng rng(opt.seed);
  for (std::size_t w : widths) {
    const std::size_t inter = 4 * w;
    std::vector<Matrix<float>> chunks;
    for (std::size_t done = 0; done < opt.n_tokens; done += opt.seq_len) {
      chunks.push_back(random_normal<float>(std::min(opt.seq_len, opt.n_tokens - done), w, rng));
    }
    for (const auto& v : variants) {
      Ffn<float> ffn;
      if (v.kind == FfnKind::Dense) {
        ffn = DenseFfn<float>{random_normal<float>(w, inter, rng, 0.02), random_normal<float>(inter, w, rng, 0.02)};
      } else {
        const std::size_t r = v.rank(w);
        if (r == 0) throw std::invalid_argument("bench_ffn: width " + std::to_string(w) + " too small for " + v.name);
        ffn = LowRankFfn<float>{random_normal<float>(w, r, rng, 0.1), random_normal<float>(r, inter, rng, 0.1),
                                random_normal<float>(inter, r, rng, 0.1), random_normal<float>(r, w, rng, 0.1)};
      }
      float sink = 0;
      BenchResult r = detail::time_reps(
          opt.timing, [] {},
          [&] {
            for (const auto& x : chunks) sink += ffn_forward(ffn, x, nullptr, opt.gelu)(0, 0);
          });
      if (sink == 12345.678f) std::fputs("", stderr);  // keep the result observable
      r.label = "ffn";
      r.width = w;
      r.variant = v.name;
      r.n_tokens = opt.n_tokens;
      r.tokens_per_s = static_cast<double>(opt.n_tokens) / r.median_s;
      out.push_back(std::move(r));
    }
  }
  return out;
}

/// Ratio of medians, dense over variant, at one width.
inline double speedup(const std::vector<BenchResult>& rows, std::size_t width, const std::string& variant) {
  const BenchResult* dense = nullptr;
  const BenchResult* other = nullptr;
  for (const auto& r : rows) {
    if (r.width != width) continue;
    if (r.variant == "dense") dense = &r;
    if (r.variant == variant) other = &r;
  }
  if (!dense || !other) throw std::invalid_argument("speedup: missing rows for width " + std::to_string(width));
  return dense->median_s / other->median_s;
}

// ---------------------------------------------------------------------------
// Generation throughput

struct GenerationBenchOptions {
  std::vector<std::size_t> batch_sizes{1, 2, 4, 8, 16, 32, 64};
  std::size_t prompt_len = 16;
  std::size_t gen_len = 256;
  std::size_t memory_budget_bytes = std::size_t{1} << 30;  // KV cache bytes
  double plateau_gain = 1.02;  // stop once a larger batch gains less than this
  BenchOptions timing;
};

struct GenerationReport {
  std::vector<BenchResult> per_batch;
  BenchResult best;  // highest tokens/s
};

/// Greedy batched decoding after a per-sequence prompt prefill. Only the
/// decode loop is timed; tokens = batch * gen_len.
template <typename T>
GenerationReport bench_generation(const TransformerLM<T>& model, const GenerationBenchOptions& opt,
                                  const std::string& variant = "model") {
  const ModelConfig& c = model.config;
  const std::size_t capacity = opt.prompt_len + opt.gen_len;
  if (opt.prompt_len == 0) throw std::invalid_argument("bench_generation: prompt_len must be positive");
  if (capacity > c.seq_len) throw std::invalid_argument("bench_generation: prompt + generation exceeds seq_len");
  GenerationReport rep;
  for (std::size_t b : opt.batch_sizes) {
    const std::size_t cache_bytes = b * KVCache<T>(c.n_layers, capacity, c.kv_dim).bytes();
    if (cache_bytes > opt.memory_budget_bytes) {
      if (rep.per_batch.empty()) {
        throw std::runtime_error("bench_generation: batch " + std::to_string(b) + " needs " +
                                 std::to_string(cache_bytes) + " cache bytes, budget " +
                                 std::to_string(opt.memory_budget_bytes));
      }
      break;
    }
    std::vector<KVCache<T>> caches;
    std::vector<Token> next(b);
    auto setup = [&] {
      caches.assign(b, KVCache<T>(c.n_layers, capacity, c.kv_dim));
      for (std::size_t i = 0; i < b; ++i) {
        std::vector<Token> prompt(opt.prompt_len);
        for (std::size_t t = 0; t < opt.prompt_len; ++t) prompt[t] = static_cast<Token>((7 * i + 13 * t + 1) % c.vocab);
        const Matrix<T> logits = forward(model, std::span<const Token>(prompt), &caches[i]);
        auto last = logits.row(logits.rows() - 1);
        next[i] = static_cast<Token>(std::max_element(last.begin(), last.end()) - last.begin());
      }
    };
    auto body = [&] {
      for (std::size_t s = 0; s < opt.gen_len; ++s) {
        const Matrix<T> logits = decode_batch(model, std::span<KVCache<T>>(caches), std::span<const Token>(next));
        for (std::size_t i = 0; i < b; ++i) {
          auto row = logits.row(i);
          next[i] = static_cast<Token>(std::max_element(row.begin(), row.end()) - row.begin());
        }
      }
    };
    BenchResult r = detail::time_reps(opt.timing, setup, body);
    r.label = "gen";
    r.width = c.width;
    r.variant = variant + "-b" + std::to_string(b);
    r.n_tokens = b * opt.gen_len;
    r.tokens_per_s = static_cast<double>(r.n_tokens) / r.median_s;
    const bool improved = rep.per_batch.empty() || r.tokens_per_s > rep.best.tokens_per_s;
    const bool plateau = !rep.per_batch.empty() && r.tokens_per_s < opt.plateau_gain * rep.best.tokens_per_s;
    if (improved) rep.best = r;
    rep.per_batch.push_back(std::move(r));
    if (plateau) break;
  }
  return rep;
}

/// FLOPs one bench_generation repetition issues at batch size b.
inline std::uint64_t generation_flops(const ModelConfig& c, std::size_t batch, std::size_t prompt_len,
                                      std::size_t gen_len) {
  std::uint64_t total = 0;
  for (std::size_t s = 0; s < gen_len; ++s) total += decode_step_flops(c, prompt_len + s + 1);
  return total * batch;
}

}  // namespace sffn
