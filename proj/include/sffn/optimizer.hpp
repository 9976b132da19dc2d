// Copyright 2026 The sffn Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "sffn/config.hpp"
#include "sffn/model.hpp"

namespace sffn {

/// Linear warmup to the peak over warmup_frac * total_steps, then cosine
/// decay to final_lr_frac * peak at total_steps.
inline double lr_at(std::size_t step, const TrainConfig& cfg) {
  if (step > cfg.total_steps) {
    throw std::out_of_range("lr_at: step " + std::to_string(step) + " > total_steps " + std::to_string(cfg.total_steps));
  }
  const double total = static_cast<double>(cfg.total_steps);
  const double warmup = cfg.warmup_frac * total;
  const double s = static_cast<double>(step);
  if (s < warmup) return cfg.peak_lr * s / warmup;
  const double span = total - warmup;
  const double progress = span > 0 ? (s - warmup) / span : 1.0;
  const double floor = cfg.final_lr_frac * cfg.peak_lr;
  return floor + (cfg.peak_lr - floor) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

template <typename T>
std::vector<std::pair<std::string, Matrix<T>*>> tensor_list(Weights<T>& w) {
  std::vector<std::pair<std::string, Matrix<T>*>> out;
  for_each_tensor(w, [&](const std::string& name, Matrix<T>& m) { out.emplace_back(name, &m); });
  return out;
}

template <typename T>
std::vector<std::pair<std::string, const Matrix<T>*>> tensor_list(const Weights<T>& w) {
  std::vector<std::pair<std::string, const Matrix<T>*>> out;
  for_each_tensor(w, [&](const std::string& name, const Matrix<T>& m) { out.emplace_back(name, &m); });
  return out;
}

template <typename T>
struct AdamState {
  Weights<T> m;
  Weights<T> v;
  std::uint64_t t = 0;

  static AdamState zeros_for(const Weights<T>& w) { return {zeros_like(w), zeros_like(w), 0}; }
};

inline bool is_norm_tensor(const std::string& name) { return name.find("ln_") != std::string::npos; }

/// Decoupled-decay Adam update with bias-corrected moments.
template <typename T>
void adamw_step(Weights<T>& params, const Weights<T>& grads, AdamState<T>& state, double lr, const TrainConfig& cfg) {
  auto p = tensor_list(params);
  auto g = tensor_list(grads);
  auto m = tensor_list(state.m);
  auto v = tensor_list(state.v);
  if (p.size() != g.size() || p.size() != m.size() || p.size() != v.size()) {
    throw ShapeError("adamw_step: parameter/gradient/state tensor counts differ");
  }
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (!p[i].second->same_shape(*g[i].second)) throw ShapeError("adamw_step: shape mismatch for " + p[i].first);
    for (T x : g[i].second->flat()) {
      if (!std::isfinite(static_cast<double>(x))) throw NumericError("adamw_step: non-finite gradient in " + g[i].first);
    }
  }
  state.t += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < p.size(); ++i) {
    const std::string& name = p[i].first;
    bool decay = cfg.weight_decay != 0.0;
    if (name == "embedding" && !cfg.decay_embedding) decay = false;
    if (is_norm_tensor(name) && !cfg.decay_norms) decay = false;
    const double shrink = decay ? 1.0 - lr * cfg.weight_decay : 1.0;
    T* pw = p[i].second->data();
    const T* gw = g[i].second->data();
    T* mw = m[i].second->data();
    T* vw = v[i].second->data();
    for (std::size_t k = 0; k < p[i].second->size(); ++k) {
      const double gk = gw[k];
      const double mk = cfg.beta1 * mw[k] + (1.0 - cfg.beta1) * gk;
      const double vk = cfg.beta2 * vw[k] + (1.0 - cfg.beta2) * gk * gk;
      mw[k] = static_cast<T>(mk);
      vw[k] = static_cast<T>(vk);
      const double update = (mk / bc1) / (std::sqrt(vk / bc2) + cfg.eps);
      pw[k] = static_cast<T>(pw[k] * shrink - lr * update);
    }
  }
}

/// Scales gradients so their global L2 norm is at most max_norm; returns
/// the norm before clipping.
template <typename T>
double clip_grad_norm(Weights<T>& grads, double max_norm) {
  long double sq = 0;
  for_each_tensor(grads, [&](const std::string&, const Matrix<T>& m) {
    for (T x : m.flat()) sq += static_cast<long double>(x) * x;
  });
  const double norm = std::sqrt(static_cast<double>(sq));
  if (max_norm > 0 && norm > max_norm) {
    const T s = static_cast<T>(max_norm / (norm + 1e-12));
    for_each_tensor(grads, [&](const std::string&, Matrix<T>& m) {
      for (T& x : m.flat()) x *= s;
    });
  }
  return norm;
}

}  // namespace sffn
