// Copyright 2026 The sffn Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <istream>
#include <iterator>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace sffn {

struct ScalingPoint {
  double flops = 0;
  double loss = 0;
  std::string label;
};

/// loss = a * flops^b, fitted by least squares in log-log space.
struct ScalingFit {
  std::string label;
  double a = 0;
  double b = 0;
  double residual_rms = 0;  // in ln(loss)
  std::size_t points = 0;
  std::string warning;

  double predict(double flops) const { return a * std::pow(flops, b); }
};

inline constexpr const char* kNotComputeOptimalWarning =
    "fitted on end-of-training points; curves are not drawn at a compute-optimal trade-off";

inline ScalingFit fit_power_law(const std::vector<ScalingPoint>& pts, std::string label = {}) {
  if (pts.size() < 2) throw std::invalid_argument("fit_power_law: need at least 2 points");
  for (const auto& p : pts) {
    if (!(p.flops > 0) || !(p.loss > 0)) throw std::invalid_argument("fit_power_law: flops and loss must be positive");
  }
  for (std::size_t i = 0; i < pts.size(); ++i)
    for (std::size_t j = i + 1; j < pts.size(); ++j)
      if (pts[i].flops == pts[j].flops) throw std::invalid_argument("fit_power_law: duplicate flops value");

  const double n = static_cast<double>(pts.size());
  double mx = 0, my = 0;
  for (const auto& p : pts) {
    mx += std::log(p.flops);
    my += std::log(p.loss);
  }
  mx /= n;
  my /= n;
  double sxy = 0, sxx = 0;
  for (const auto& p : pts) {
    const double dx = std::log(p.flops) - mx;
    sxy += dx * (std::log(p.loss) - my);
    sxx += dx * dx;
  }
  ScalingFit f;
  f.label = label.empty() ? pts.front().label : std::move(label);
  f.b = sxy / sxx;
  f.a = std::exp(my - f.b * mx);
  double ss = 0;
  for (const auto& p : pts) {
    const double r = std::log(p.loss) - (my + f.b * (std::log(p.flops) - mx));
    ss += r * r;
  }
  f.residual_rms = std::sqrt(ss / n);
  f.points = pts.size();
  f.warning = kNotComputeOptimalWarning;
  return f;
}

struct SlopePair {
  std::string steeper;
  std::string shallower;
  double delta_b = 0;                     // b(steeper) - b(shallower), <= 0
  std::optional<double> crossover_flops;  // where the two fitted curves meet
};

struct SlopeComparison {
  std::vector<ScalingFit> by_slope;  // most negative b first
  std::vector<SlopePair> pairs;
};

/// FLOPs at which two log-linear fits intersect; none for parallel fits.
inline std::optional<double> crossover(const ScalingFit& f1, const ScalingFit& f2) {
  if (f1.b == f2.b) return std::nullopt;
  return std::exp((std::log(f1.a) - std::log(f2.a)) / (f2.b - f1.b));
}

inline SlopeComparison compare_slopes(std::vector<ScalingFit> fits) {
  if (fits.size() < 2) throw std::invalid_argument("compare_slopes: need at least 2 fits");
  std::stable_sort(fits.begin(), fits.end(), [](const auto& x, const auto& y) { return x.b < y.b; });
  SlopeComparison out;
  for (std::size_t i = 0; i < fits.size(); ++i) {
    for (std::size_t j = i + 1; j < fits.size(); ++j) {
      out.pairs.push_back({fits[i].label, fits[j].label, fits[i].b - fits[j].b, crossover(fits[i], fits[j])});
    }
  }
  out.by_slope = std::move(fits);
  return out;
}

// ---------------------------------------------------------------------------
// CSV: label,flops,loss (header optional)

inline std::vector<ScalingPoint> read_scaling_csv(std::istream& is) {
  std::vector<ScalingPoint> out;
  std::string line;
  int lineno = 0;
  bool first = true;
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    std::string label, flops, loss;
    if (!std::getline(ls, label, ',') || !std::getline(ls, flops, ',') || !std::getline(ls, loss)) {
      throw std::invalid_argument("scaling csv line " + std::to_string(lineno) + ": expected label,flops,loss");
    }
    const bool header = first && label == "label";
    first = false;
    if (header) continue;
    try {
      out.push_back({std::stod(flops), std::stod(loss), label});
    } catch (const std::exception&) {
      throw std::invalid_argument("scaling csv line " + std::to_string(lineno) + ": bad number");
    }
  }
  return out;
}

/// Groups points by label, preserving first-appearance order.
inline std::vector<std::pair<std::string, std::vector<ScalingPoint>>> group_by_label(const std::vector<ScalingPoint>& pts) {
  std::vector<std::pair<std::string, std::vector<ScalingPoint>>> groups;
  for (const auto& p : pts) {
    auto it = std::find_if(groups.begin(), groups.end(), [&](const auto& g) { return g.first == p.label; });
    if (it == groups.end()) {
      groups.push_back({p.label, {}});
      it = std::prev(groups.end());
    }
    it->second.push_back(p);
  }
  return groups;
}

inline void write_fit_csv(std::ostream& os, const std::vector<ScalingFit>& fits) {
  os << "label,a,b,residual_rms,points\n";
  char buf[256];
  for (const auto& f : fits) {
    std::snprintf(buf, sizeof buf, "%s,%.17g,%.17g,%.17g,%zu\n", f.label.c_str(), f.a, f.b, f.residual_rms, f.points);
    os << buf;
  }
}

inline void write_fit_report(std::ostream& os, const SlopeComparison& cmp) {
  char buf[256];
  os << "fits (steepest first):\n";
  for (const auto& f : cmp.by_slope) {
    std::snprintf(buf, sizeof buf, "  %-16s a=%.6g  b=%+.6f  rms=%.3g  n=%zu\n", f.label.c_str(), f.a, f.b,
                  f.residual_rms, f.points);
    os << buf;
  }
  os << "pairs:\n";
  for (const auto& p : cmp.pairs) {
    std::snprintf(buf, sizeof buf, "  %-16s vs %-16s delta_b=%+.6f  crossover=", p.steeper.c_str(), p.shallower.c_str(),
                  p.delta_b);
    os << buf;
    if (p.crossover_flops) {
      std::snprintf(buf, sizeof buf, "%.4e\n", *p.crossover_flops);
      os << buf;
    } else {
      os << "none\n";
    }
  }
  if (!cmp.by_slope.empty()) os << "warning: " << cmp.by_slope.front().warning << "\n";
}

}  // namespace sffn
