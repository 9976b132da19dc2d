// Copyright 2026 The sffn Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "reference_tables.hpp"
#include "sffn/accounting.hpp"

namespace sffn {
namespace {

double rel(double got, double want) { return std::abs(got - want) / want; }

// Bias-free pre-norm transformer with tied embeddings, counted term by term.
double closed_form_params(double d, double layers, double vocab, double inter, double rank, bool first_dense) {
  const double attn = 4 * d * d;
  const double dense_ffn = 2 * d * inter;
  const double lr_ffn = 2 * rank * (d + inter);
  double ffn = 0;
  for (int l = 0; l < layers; ++l) ffn += (rank == 0 || (l == 0 && first_dense)) ? dense_ffn : lr_ffn;
  return vocab * d + layers * attn + ffn + (2 * layers + 1) * 2 * d;
}

TEST(Params, BaselinesWithinOnePercent) {
  for (const auto& row : reference::kBaselines) {
    const auto p = count_params(*preset(row.preset));
    EXPECT_LT(rel(static_cast<double>(p.total) / 1e6, row.params_m), 0.01) << row.preset;
  }
}

TEST(Params, MatchClosedForm) {
  for (const auto& row : reference::kFamilies) {
    const ModelConfig c = reference::family_config(row);
    const double want = closed_form_params(static_cast<double>(c.width), static_cast<double>(c.n_layers), 32000,
                                           static_cast<double>(c.intermediate), static_cast<double>(row.rank), true);
    EXPECT_EQ(static_cast<double>(count_params(c).total), want) << c.width << " R=" << row.rank;
  }
}

TEST(Params, FamilyTableWithinTolerance) {
  for (const auto& row : reference::kFamilies) {
    const ModelConfig c = reference::family_config(row);
    const ParamBreakdown p = count_params(c);
    EXPECT_LT(rel(static_cast<double>(p.total) / 1e6, row.params_m), 0.015) << c.width << " R=" << row.rank;
    EXPECT_LT(rel(static_cast<double>(p.ffn) / 1e6, row.ffn_m), 0.015) << c.width << " R=" << row.rank;
  }
}

TEST(Params, SmallBaselineBreakdown) {
  const ParamBreakdown p = count_params(*preset("s"));
  EXPECT_EQ(p.embedding, 32000u * 768);
  EXPECT_EQ(p.attention, 12u * 4 * 768 * 768);
  EXPECT_EQ(p.ffn, 12u * 2 * 768 * 3072);
  EXPECT_EQ(p.layernorm, 25u * 2 * 768);
  EXPECT_EQ(p.total, p.embedding + p.attention + p.ffn + p.layernorm);
}

TEST(Params, EmbeddingOnlyModel) {
  ModelConfig c;
  c.width = 64;
  c.n_layers = 0;
  c.vocab = 10;
  const ParamBreakdown p = count_params(c.resolved());
  EXPECT_EQ(p.total, 640u);
  EXPECT_EQ(p.layernorm, 0u);
}

TEST(Params, GroupedQueryAttentionShapes) {
  ModelConfig c;
  c.width = 1024;
  c.q_dim = 512;
  c.kv_dim = 256;
  c.n_heads = 8;
  EXPECT_EQ(attention_params_per_layer(c.resolved()), 1024u * 512 + 2u * 1024 * 256 + 512u * 1024);
}

TEST(Params, WidePresetsMatchPublishedTotals) {
  for (const auto& row : reference::kWide) {
    EXPECT_LT(rel(static_cast<double>(count_params(*preset(row.preset)).total) / 1e6, row.params_m), 0.01)
        << row.preset;
  }
}

TEST(LowRankRatio, ExactForHalfAndQuarterRank) {
  for (std::uint64_t d : {768u, 1024u, 1536u, 2048u}) {
    EXPECT_EQ(lowrank_ratio(d, 4 * d, d / 2), 0.625);
    EXPECT_EQ(lowrank_ratio(d, 4 * d, d / 4), 0.3125);
  }
  EXPECT_EQ(lowrank_ratio(10, 40, 0), 0.0);
}

TEST(LowRankRatio, BreakEvenRankGivesOne) {
  // R = MN / (M + N) makes the factorized and dense counts equal.
  EXPECT_DOUBLE_EQ(lowrank_ratio(10, 40, 8), 1.0);
}

TEST(Flops, FamilyTableWithinTolerance) {
  for (const auto& row : reference::kFamilies) {
    const ModelConfig c = reference::family_config(row);
    const double f = training_flops(c, row.tokens_b * 1e9).train_total();
    EXPECT_LT(rel(f, row.train_flops), 0.015) << c.width << " R=" << row.rank << " got " << f;
  }
}

TEST(Flops, ComponentsAddUp) {
  const ModelConfig c = *preset("m");
  const FlopsBreakdown f = training_flops(c, 1000.0);
  const ParamBreakdown p = count_params(c);
  EXPECT_EQ(f.linear_per_token, 2.0 * static_cast<double>(p.attention + p.ffn));
  EXPECT_EQ(f.logits_per_token, 2.0 * 32000 * 1024);
  EXPECT_EQ(f.attention_quadratic_per_token, 24.0 * 4 * 1024 * 1024);
  EXPECT_EQ(f.fwd_per_token, f.linear_per_token + f.logits_per_token + f.attention_quadratic_per_token);
  EXPECT_EQ(f.train_total(), 3.0 * f.fwd_per_token * 1000.0);
}

TEST(Flops, ScalesLinearlyInTokens) {
  const ModelConfig c = *preset("s");
  EXPECT_DOUBLE_EQ(training_flops(c, 2e9).train_total(), 2 * training_flops(c, 1e9).train_total());
}

TEST(Tokens, TwentyPerParameter) {
  EXPECT_EQ(tokens_for_params(110e6), 2.2e9);
  EXPECT_THROW(tokens_for_params(0), std::invalid_argument);
  // Baseline token budgets round to the published 2.2/6.7/14.6/25.5 B.
  const double want[] = {2.2, 6.7, 14.6, 25.5};
  int i = 0;
  for (const auto& row : reference::kBaselines) {
    const double t = tokens_for_params(static_cast<double>(count_params(*preset(row.preset)).total));
    EXPECT_NEAR(t / 1e9, want[i++], 0.06) << row.preset;
  }
}

TEST(Budget, WideMediumAtEqualFlops) {
  const BudgetPlan p = tokens_for_flops_budget(*preset("wide-m"), 1.55e19);
  EXPECT_EQ(p.tokens_billions, 10.6);
  EXPECT_NEAR(p.tokens * 3 * training_flops(*preset("wide-m"), 0).fwd_per_token, 1.55e19, 1e5);
  EXPECT_NEAR(p.steps, p.tokens / 0.5e6, 1e-6);
}

TEST(Budget, RejectsNonPositiveBudget) {
  EXPECT_THROW(tokens_for_flops_budget(*preset("s"), 0.0), std::invalid_argument);
}

TEST(Output, CsvHasHeaderAndTotal) {
  std::ostringstream os;
  write_params_csv(os, count_params(*preset("s")));
  EXPECT_EQ(os.str().rfind("component,count\n", 0), 0u);
  EXPECT_NE(os.str().find("total,109549056\n"), std::string::npos);
}

}  // namespace
}  // namespace sffn
