// Copyright 2026 The sffn Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <charconv>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include "sffn/config.hpp"

namespace sffn {

/// Everything a run needs, as flat `key = value` lines with `#` comments.
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  std::string corpus;
  std::string checkpoint;
  std::string out_dir = ".";

  friend bool operator==(const RunConfig&, const RunConfig&) = default;
};

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

template <typename I>
I parse_unsigned(const std::string& key, const std::string& v) {
  I out{};
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) throw ConfigError("key '" + key + "': expected integer, got '" + v + "'");
  return out;
}

inline double parse_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    double d = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw ConfigError("key '" + key + "': expected number, got '" + v + "'");
  }
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("key '" + key + "': expected true/false, got '" + v + "'");
}

// One accessor pair per key, in dump order.
struct Field {
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&, const std::string&)> set;
};

inline const std::vector<std::pair<std::string, Field>>& run_config_fields() {
  using R = RunConfig;
  auto uint = [](auto getter) {
    return Field{[getter](const R& r) { return std::to_string(getter(const_cast<R&>(r))); },
                 [getter](R& r, const std::string& k, const std::string& v) {
                   getter(r) = parse_unsigned<std::remove_reference_t<decltype(getter(r))>>(k, v);
                 }};
  };
  auto real = [](auto getter) {
    return Field{[getter](const R& r) { return format_double(getter(const_cast<R&>(r))); },
                 [getter](R& r, const std::string& k, const std::string& v) { getter(r) = parse_double(k, v); }};
  };
  auto flag = [](auto getter) {
    return Field{[getter](const R& r) { return std::string(getter(const_cast<R&>(r)) ? "true" : "false"); },
                 [getter](R& r, const std::string& k, const std::string& v) { getter(r) = parse_bool(k, v); }};
  };
  auto text = [](auto getter) {
    return Field{[getter](const R& r) { return getter(const_cast<R&>(r)); },
                 [getter](R& r, const std::string&, const std::string& v) { getter(r) = v; }};
  };
  static const std::vector<std::pair<std::string, Field>> fields{
      {"width", uint([](R& r) -> std::size_t& { return r.model.width; })},
      {"layers", uint([](R& r) -> std::size_t& { return r.model.n_layers; })},
      {"vocab", uint([](R& r) -> std::size_t& { return r.model.vocab; })},
      {"seq_len", uint([](R& r) -> std::size_t& { return r.model.seq_len; })},
      {"intermediate", uint([](R& r) -> std::size_t& { return r.model.intermediate; })},
      {"ffn",
       Field{[](const R& r) { return std::string(r.model.ffn.kind == FfnKind::LowRank ? "lowrank" : "dense"); },
             [](R& r, const std::string& k, const std::string& v) {
               if (v == "dense") r.model.ffn.kind = FfnKind::Dense;
               else if (v == "lowrank") r.model.ffn.kind = FfnKind::LowRank;
               else throw ConfigError("key '" + k + "': expected dense or lowrank, got '" + v + "'");
             }}},
      {"rank", uint([](R& r) -> std::size_t& { return r.model.ffn.rank; })},
      {"first_block_dense", flag([](R& r) -> bool& { return r.model.ffn.first_block_dense; })},
      {"heads", uint([](R& r) -> std::size_t& { return r.model.n_heads; })},
      {"q_dim", uint([](R& r) -> std::size_t& { return r.model.q_dim; })},
      {"kv_dim", uint([](R& r) -> std::size_t& { return r.model.kv_dim; })},
      {"rotary_base", real([](R& r) -> double& { return r.model.rotary_base; })},
      {"peak_lr", real([](R& r) -> double& { return r.train.peak_lr; })},
      {"warmup_frac", real([](R& r) -> double& { return r.train.warmup_frac; })},
      {"final_lr_frac", real([](R& r) -> double& { return r.train.final_lr_frac; })},
      {"beta1", real([](R& r) -> double& { return r.train.beta1; })},
      {"beta2", real([](R& r) -> double& { return r.train.beta2; })},
      {"eps", real([](R& r) -> double& { return r.train.eps; })},
      {"weight_decay", real([](R& r) -> double& { return r.train.weight_decay; })},
      {"grad_clip", real([](R& r) -> double& { return r.train.grad_clip; })},
      {"decay_embedding", flag([](R& r) -> bool& { return r.train.decay_embedding; })},
      {"decay_norms", flag([](R& r) -> bool& { return r.train.decay_norms; })},
      {"global_batch_tokens", uint([](R& r) -> std::size_t& { return r.train.global_batch_tokens; })},
      {"micro_batch_tokens", uint([](R& r) -> std::size_t& { return r.train.micro_batch_tokens; })},
      {"total_steps", uint([](R& r) -> std::size_t& { return r.train.total_steps; })},
      {"seed", uint([](R& r) -> std::uint64_t& { return r.train.seed; })},
      {"repeat", flag([](R& r) -> bool& { return r.train.repeat; })},
      {"corpus", text([](R& r) -> std::string& { return r.corpus; })},
      {"checkpoint", text([](R& r) -> std::string& { return r.checkpoint; })},
      {"out", text([](R& r) -> std::string& { return r.out_dir; })},
  };
  return fields;
}

}  // namespace detail

/// Sets one key; unknown keys and malformed values throw ConfigError.
inline void set_key(RunConfig& cfg, const std::string& key, const std::string& value) {
  for (const auto& [name, field] : detail::run_config_fields()) {
    if (name == key) {
      field.set(cfg, key, value);
      return;
    }
  }
  throw ConfigError("unknown config key '" + key + "'");
}

/// Applies `key = value` lines on top of `base`.
inline RunConfig parse_run_config(std::string_view text, RunConfig base = {}) {
  std::istringstream in{std::string(text)};
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const std::string t = detail::trim(line);
    if (t.empty()) continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected 'key = value'");
    set_key(base, detail::trim(std::string_view(t).substr(0, eq)), detail::trim(std::string_view(t).substr(eq + 1)));
  }
  return base;
}

inline RunConfig load_run_config(const std::string& path, RunConfig base = {}) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config file " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_run_config(ss.str(), std::move(base));
}

inline std::string dump_run_config(const RunConfig& cfg) {
  std::string out;
  for (const auto& [name, field] : detail::run_config_fields()) out += name + " = " + field.get(cfg) + "\n";
  return out;
}

/// Model-only subset, used by checkpoint headers.
inline std::string dump_model_config(const ModelConfig& model) {
  RunConfig r;
  r.model = model;
  std::string out;
  for (const auto& [name, field] : detail::run_config_fields()) {
    if (name == "peak_lr") break;
    out += name + " = " + field.get(r) + "\n";
  }
  return out;
}

inline ModelConfig parse_model_config(std::string_view text) { return parse_run_config(text).model; }

}  // namespace sffn
