// Copyright 2026 The sffn Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "sffn/numeric.hpp"

namespace sffn {

// Central-difference gradient check. Returns
//   max_i |fd_i - analytic_i| / (|analytic_i| + 1e-8)
// where fd_i = (f(theta + h e_i) - f(theta - h e_i)) / 2h.
template <typename F>
double grad_check(F&& f, std::vector<double> theta, std::span<const double> analytic, double h = 1e-5) {
  if (analytic.size() != theta.size()) {
    throw ShapeError("grad_check: theta has " + std::to_string(theta.size()) + " entries, gradient " +
                     std::to_string(analytic.size()));
  }
  double worst = 0.0;
  for (std::size_t i = 0; i < theta.size(); ++i) {
    const double saved = theta[i];
    theta[i] = saved + h;
    const double up = f(std::as_const(theta));
    theta[i] = saved - h;
    const double down = f(std::as_const(theta));
    theta[i] = saved;
    if (!std::isfinite(up) || !std::isfinite(down)) {
      throw NumericError("grad_check: non-finite objective at probe index " + std::to_string(i));
    }
    const double fd = (up - down) / (2.0 * h);
    worst = std::max(worst, std::abs(fd - analytic[i]) / (std::abs(analytic[i]) + 1e-8));
  }
  return worst;
}

}  // namespace sffn
