// Copyright 2026 The sffn Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "reference_tables.hpp"
#include "sffn/scaling.hpp"

namespace sffn {
namespace {

// Uncentered normal equations for ln L = ln a + b ln C.
std::pair<double, double> normal_equations(const std::vector<ScalingPoint>& pts) {
  double n = 0, sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (const auto& p : pts) {
    const double x = std::log(p.flops), y = std::log(p.loss);
    n += 1;
    sx += x;
    sy += y;
    sxx += x * x;
    sxy += x * y;
  }
  const double det = n * sxx - sx * sx;
  const double b = (n * sxy - sx * sy) / det;
  const double ln_a = (sxx * sy - sx * sxy) / det;
  return {std::exp(ln_a), b};
}

std::vector<ScalingPoint> family_points(const std::string& label) {
  std::vector<ScalingPoint> out;
  for (const auto& row : reference::kFamilies) {
    if (reference::family_label(row) == label) out.push_back({row.train_flops, row.loss, label});
  }
  return out;
}

std::vector<ScalingPoint> reference_csv() {
  std::ifstream f(std::string(SFFN_DATA_DIR) + "/reference_scaling_points.csv");
  return read_scaling_csv(f);
}

TEST(FitPowerLaw, RecoversExactPowerLaw) {
  std::vector<ScalingPoint> pts;
  for (double c : {1e17, 3e17, 2e18, 5e19, 8e20}) pts.push_back({c, 5.0 * std::pow(c, -0.05), "x"});
  const ScalingFit f = fit_power_law(pts);
  EXPECT_NEAR(f.b, -0.05, 1e-10);
  EXPECT_NEAR(f.a, 5.0, 1e-8);
  EXPECT_LT(f.residual_rms, 1e-12);
  EXPECT_EQ(f.points, 5u);
  EXPECT_EQ(f.label, "x");
  EXPECT_FALSE(f.warning.empty());
}

TEST(FitPowerLaw, MatchesNormalEquationsOnPublishedPoints) {
  for (const char* label : {"dense", "lowrank-63", "lowrank-32"}) {
    const auto pts = family_points(label);
    ASSERT_EQ(pts.size(), 4u);
    const ScalingFit f = fit_power_law(pts);
    const auto [a, b] = normal_equations(pts);
    EXPECT_NEAR(f.b, b, 1e-9) << label;
    EXPECT_NEAR(f.a / a, 1.0, 1e-7) << label;
  }
}

TEST(FitPowerLaw, PublishedSlopes) {
  EXPECT_NEAR(fit_power_law(family_points("dense")).b, -0.05351480663349215, 1e-12);
  EXPECT_NEAR(fit_power_law(family_points("lowrank-63")).b, -0.05464387059037128, 1e-12);
  EXPECT_NEAR(fit_power_law(family_points("lowrank-32")).b, -0.05613749685658945, 1e-12);
}

TEST(FitPowerLaw, TwoPointsInterpolateExactly) {
  const std::vector<ScalingPoint> pts{{1e18, 3.3, ""}, {4e19, 2.8, ""}};
  const ScalingFit f = fit_power_law(pts);
  EXPECT_NEAR(f.predict(1e18), 3.3, 1e-12);
  EXPECT_NEAR(f.predict(4e19), 2.8, 1e-12);
  EXPECT_LT(f.residual_rms, 1e-14);
}

TEST(FitPowerLaw, ScalingFlopsKeepsSlope) {
  const auto pts = family_points("dense");
  auto scaled = pts;
  for (auto& p : scaled) p.flops *= 1000;
  const ScalingFit f = fit_power_law(pts), g = fit_power_law(scaled);
  EXPECT_NEAR(g.b, f.b, 1e-12);
  EXPECT_NEAR(g.a, f.a * std::pow(1000.0, -f.b), 1e-9 * f.a);
}

TEST(FitPowerLaw, ScalingLossScalesPrefactor) {
  const auto pts = family_points("lowrank-32");
  auto scaled = pts;
  for (auto& p : scaled) p.loss *= 2.5;
  const ScalingFit f = fit_power_law(pts), g = fit_power_law(scaled);
  EXPECT_NEAR(g.b, f.b, 1e-12);
  EXPECT_NEAR(g.a / f.a, 2.5, 1e-10);
}

TEST(FitPowerLaw, RefittingPredictionsIsIdempotent) {
  const ScalingFit f = fit_power_law(family_points("dense"));
  std::vector<ScalingPoint> on_curve;
  for (const auto& p : family_points("dense")) on_curve.push_back({p.flops, f.predict(p.flops), ""});
  const ScalingFit g = fit_power_law(on_curve);
  EXPECT_NEAR(g.b, f.b, 1e-12);
  EXPECT_NEAR(g.a / f.a, 1.0, 1e-10);
}

TEST(FitPowerLaw, RejectsDegenerateInput) {
  EXPECT_THROW(fit_power_law({{1e18, 3.0, ""}}), std::invalid_argument);
  EXPECT_THROW(fit_power_law({{1e18, 3.0, ""}, {1e18, 2.9, ""}}), std::invalid_argument);
  EXPECT_THROW(fit_power_law({{1e18, 3.0, ""}, {0, 2.9, ""}}), std::invalid_argument);
  EXPECT_THROW(fit_power_law({{1e18, 3.0, ""}, {1e19, -1, ""}}), std::invalid_argument);
}

TEST(CompareSlopes, SmallerRankIsSteeper) {
  std::vector<ScalingFit> fits;
  for (const char* label : {"dense", "lowrank-63", "lowrank-32"}) fits.push_back(fit_power_law(family_points(label)));
  const SlopeComparison cmp = compare_slopes(fits);
  ASSERT_EQ(cmp.by_slope.size(), 3u);
  EXPECT_EQ(cmp.by_slope[0].label, "lowrank-32");
  EXPECT_EQ(cmp.by_slope[1].label, "lowrank-63");
  EXPECT_EQ(cmp.by_slope[2].label, "dense");
  ASSERT_EQ(cmp.pairs.size(), 3u);
  auto fit = [&](const std::string& label) {
    return *std::find_if(fits.begin(), fits.end(), [&](const ScalingFit& f) { return f.label == label; });
  };
  for (const auto& p : cmp.pairs) {
    EXPECT_LT(p.delta_b, 0) << p.steeper << " vs " << p.shallower;
    ASSERT_TRUE(p.crossover_flops.has_value());
    const double c = *p.crossover_flops;
    EXPECT_NEAR(fit(p.steeper).predict(c) / fit(p.shallower).predict(c), 1.0, 1e-10);
    // The steeper family is worse at small compute and better past the crossover.
    EXPECT_GT(fit(p.steeper).predict(c / 10), fit(p.shallower).predict(c / 10));
    EXPECT_LT(fit(p.steeper).predict(c * 10), fit(p.shallower).predict(c * 10));
  }
}

TEST(CompareSlopes, IdenticalFitsHaveNoCrossover) {
  const ScalingFit f = fit_power_law(family_points("dense"));
  ScalingFit g = f;
  g.label = "copy";
  const SlopeComparison cmp = compare_slopes({f, g});
  EXPECT_EQ(cmp.pairs[0].delta_b, 0.0);
  EXPECT_FALSE(cmp.pairs[0].crossover_flops.has_value());
}

TEST(CompareSlopes, CrossoverIsWhereCurvesMeet) {
  ScalingFit f, g;
  f.a = 40, f.b = -0.06;
  g.a = 30, g.b = -0.05;
  const double c = *crossover(f, g);
  EXPECT_NEAR(f.predict(c) / g.predict(c), 1.0, 1e-12);
  EXPECT_NEAR(std::log(c), std::log(40.0 / 30.0) / 0.01, 1e-9);
  EXPECT_THROW(compare_slopes({f}), std::invalid_argument);
}

TEST(ScalingCsv, ReferenceFileGroupsIntoThreeFamilies) {
  const auto groups = group_by_label(reference_csv());
  ASSERT_EQ(groups.size(), 3u);
  EXPECT_EQ(groups[0].first, "dense");
  for (const auto& [label, pts] : groups) {
    EXPECT_EQ(pts.size(), 4u);
    const auto table = family_points(label);
    for (std::size_t i = 0; i < 4; ++i) {
      EXPECT_EQ(pts[i].flops, table[i].flops);
      EXPECT_EQ(pts[i].loss, table[i].loss);
    }
  }
}

TEST(ScalingCsv, HeaderIsOptionalAndErrorsNameTheLine) {
  std::istringstream no_header("a,1e18,3.0\r\na,2e18,2.9\n");
  EXPECT_EQ(read_scaling_csv(no_header).size(), 2u);
  std::istringstream bad("label,flops,loss\na,1e18\n");
  try {
    read_scaling_csv(bad);
    FAIL();
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos);
  }
  std::istringstream nan_text("a,lots,3\n");
  EXPECT_THROW(read_scaling_csv(nan_text), std::invalid_argument);
}

TEST(ScalingCsv, FitOutputRoundTripsToFullPrecision) {
  const ScalingFit f = fit_power_law(family_points("dense"), "dense");
  std::ostringstream os;
  write_fit_csv(os, {f});
  std::istringstream is(os.str());
  std::string header, row;
  std::getline(is, header);
  std::getline(is, row);
  EXPECT_EQ(header, "label,a,b,residual_rms,points");
  std::istringstream rs(row);
  std::string label, a, b;
  std::getline(rs, label, ',');
  std::getline(rs, a, ',');
  std::getline(rs, b, ',');
  EXPECT_EQ(std::stod(a), f.a);
  EXPECT_EQ(std::stod(b), f.b);
}

}  // namespace
}  // namespace sffn
