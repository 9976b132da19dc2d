// Copyright 2026 The sffn Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <iomanip>
#include <ostream>
#include <stdexcept>
#include <string>

#include "sffn/config.hpp"

namespace sffn {

// Parameter counts. Projections carry no biases; the embedding is tied to
// the output head and counted once.
struct ParamBreakdown {
  std::uint64_t embedding = 0;
  std::uint64_t attention = 0;
  std::uint64_t ffn = 0;
  std::uint64_t layernorm = 0;
  std::uint64_t total = 0;
};

inline std::uint64_t attention_params_per_layer(const ModelConfig& c) {
  return c.width * c.q_dim + 2 * c.width * c.kv_dim + c.q_dim * c.width;
}

inline std::uint64_t dense_ffn_params(std::uint64_t d, std::uint64_t inter) { return 2 * d * inter; }

inline std::uint64_t low_rank_ffn_params(std::uint64_t d, std::uint64_t inter, std::uint64_t r) {
  return 2 * (d + inter) * r;
}

inline std::uint64_t ffn_params_for_layer(const ModelConfig& c, std::size_t layer) {
  return c.block_is_low_rank(layer) ? low_rank_ffn_params(c.width, c.intermediate, c.ffn.rank)
                                    : dense_ffn_params(c.width, c.intermediate);
}

inline ParamBreakdown count_params(const ModelConfig& config) {
  const ModelConfig c = config.resolved();
  ParamBreakdown p;
  p.embedding = static_cast<std::uint64_t>(c.vocab) * c.width;
  p.attention = c.n_layers * attention_params_per_layer(c);
  for (std::size_t l = 0; l < c.n_layers; ++l) p.ffn += ffn_params_for_layer(c, l);
  // Two norms per block plus the final norm, each with gain and bias.
  p.layernorm = c.n_layers == 0 ? 0 : (2 * c.n_layers + 1) * 2 * c.width;
  p.total = p.embedding + p.attention + p.ffn + p.layernorm;
  return p;
}

/// Parameter (and FLOP) fraction kept by factorizing a d x inter layer at rank r.
inline double lowrank_ratio(std::uint64_t d, std::uint64_t inter, std::uint64_t r) {
  return static_cast<double>((d + inter) * r) / static_cast<double>(d * inter);
}

// Matmul-only FLOPs. A multiply-add is two FLOPs; backward costs twice the
// forward, so training is 3x forward.
struct FlopsBreakdown {
  double linear_per_token = 0;               // 2 * (attention + FFN params)
  double attention_quadratic_per_token = 0;  // QK^T and AV at query width
  double logits_per_token = 0;               // 2 * vocab * d
  double fwd_per_token = 0;
  double tokens = 0;

  double train_total() const { return 3.0 * fwd_per_token * tokens; }
  double train_total(double n_tokens) const { return 3.0 * fwd_per_token * n_tokens; }
};

inline FlopsBreakdown training_flops(const ModelConfig& config, double tokens, std::size_t seq_len) {
  const ModelConfig c = config.resolved();
  const ParamBreakdown p = count_params(c);
  FlopsBreakdown f;
  f.linear_per_token = 2.0 * static_cast<double>(p.attention + p.ffn);
  f.attention_quadratic_per_token =
      static_cast<double>(c.n_layers) * (2.0 * seq_len * c.q_dim + 2.0 * seq_len * c.q_dim);
  f.logits_per_token = 2.0 * static_cast<double>(c.vocab) * c.width;
  f.fwd_per_token = f.linear_per_token + f.attention_quadratic_per_token + f.logits_per_token;
  f.tokens = tokens;
  return f;
}

inline FlopsBreakdown training_flops(const ModelConfig& config, double tokens) {
  return training_flops(config, tokens, config.seq_len);
}

/// Token allocation at 20 tokens per parameter.
inline double tokens_for_params(double params) {
  if (!(params > 0)) throw std::invalid_argument("tokens_for_params: params must be positive");
  return 20.0 * params;
}

struct BudgetPlan {
  std::uint64_t params = 0;
  double flops_budget = 0;
  double tokens = 0;           // exact: budget / (3 * fwd_per_token)
  double tokens_billions = 0;  // rounded to 0.1B for display
  double steps = 0;            // at batch_tokens per step
};

inline BudgetPlan tokens_for_flops_budget(const ModelConfig& config, double budget, double batch_tokens = 0.5e6) {
  if (!(budget > 0)) throw std::invalid_argument("tokens_for_flops_budget: budget must be positive");
  const FlopsBreakdown f = training_flops(config, 0.0);
  BudgetPlan plan;
  plan.params = count_params(config).total;
  plan.flops_budget = budget;
  plan.tokens = budget / (3.0 * f.fwd_per_token);
  plan.tokens_billions = std::round(plan.tokens / 1e8) / 10.0;
  plan.steps = plan.tokens / batch_tokens;
  return plan;
}

// ---------------------------------------------------------------------------
// Instrumented-workload predictions, matched exactly by the FLOP counter.

/// One FFN block applied to n_tokens rows.
inline std::uint64_t ffn_forward_flops(std::uint64_t d, std::uint64_t inter, FfnKind kind, std::uint64_t rank,
                                       std::uint64_t n_tokens) {
  const std::uint64_t params =
      kind == FfnKind::Dense ? dense_ffn_params(d, inter) : low_rank_ffn_params(d, inter, rank);
  return 2 * params * n_tokens;
}

/// One decode step for one sequence attending over `context` positions
/// (including the new token).
inline std::uint64_t decode_step_flops(const ModelConfig& config, std::uint64_t context) {
  const ModelConfig c = config.resolved();
  const ParamBreakdown p = count_params(c);
  return 2 * (p.attention + p.ffn) + 2 * p.embedding + c.n_layers * 4 * context * c.q_dim;
}

// ---------------------------------------------------------------------------
// Output

inline void write_params_table(std::ostream& os, const ParamBreakdown& p) {
  auto line = [&](const char* name, std::uint64_t v) {
    os << std::left << std::setw(12) << name << std::right << std::setw(16) << v << std::setw(12)
       << std::fixed << std::setprecision(2) << static_cast<double>(v) / 1e6 << "M\n";
  };
  line("embedding", p.embedding);
  line("attention", p.attention);
  line("ffn", p.ffn);
  line("layernorm", p.layernorm);
  line("total", p.total);
  os.unsetf(std::ios::fixed);
}

inline void write_params_csv(std::ostream& os, const ParamBreakdown& p) {
  os << "component,count\n"
     << "embedding," << p.embedding << "\n"
     << "attention," << p.attention << "\n"
     << "ffn," << p.ffn << "\n"
     << "layernorm," << p.layernorm << "\n"
     << "total," << p.total << "\n";
}

inline void write_flops_table(std::ostream& os, const FlopsBreakdown& f) {
  auto line = [&](const char* name, double v) {
    os << std::left << std::setw(28) << name << std::right << std::setw(14) << std::scientific
       << std::setprecision(4) << v << "\n";
  };
  line("linear_per_token", f.linear_per_token);
  line("attention_quadratic_per_token", f.attention_quadratic_per_token);
  line("logits_per_token", f.logits_per_token);
  line("fwd_per_token", f.fwd_per_token);
  line("tokens", f.tokens);
  line("train_total", f.train_total());
  os.unsetf(std::ios::scientific);
}

inline void write_flops_csv(std::ostream& os, const FlopsBreakdown& f) {
  os << std::setprecision(17) << "component,count\n"
     << "linear_per_token," << f.linear_per_token << "\n"
     << "attention_quadratic_per_token," << f.attention_quadratic_per_token << "\n"
     << "logits_per_token," << f.logits_per_token << "\n"
     << "fwd_per_token," << f.fwd_per_token << "\n"
     << "tokens," << f.tokens << "\n"
     << "train_total," << f.train_total() << "\n";
}

}  // namespace sffn
