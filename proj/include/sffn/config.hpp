// Copyright 2026 The sffn Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace sffn {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class FfnKind { Dense, LowRank };

struct FfnSpec {
  FfnKind kind = FfnKind::Dense;
  std::size_t rank = 0;
  bool first_block_dense = true;

  static FfnSpec dense() { return {}; }
  static FfnSpec low_rank(std::size_t r, bool first_dense = true) { return {FfnKind::LowRank, r, first_dense}; }
  friend bool operator==(const FfnSpec&, const FfnSpec&) = default;
};

/// Architecture of a decoder-only LM. Zero-valued `intermediate`, `q_dim`
/// and `kv_dim` mean "use the default" (4d, d, d); see resolved().
struct ModelConfig {
  std::size_t width = 0;
  std::size_t n_layers = 0;
  std::size_t vocab = 32000;
  std::size_t seq_len = 1024;
  std::size_t intermediate = 0;
  FfnSpec ffn;
  std::size_t n_heads = 1;
  std::size_t q_dim = 0;
  std::size_t kv_dim = 0;
  double rotary_base = 10000.0;

  ModelConfig resolved() const {
    ModelConfig c = *this;
    if (c.intermediate == 0) c.intermediate = 4 * c.width;
    if (c.q_dim == 0) c.q_dim = c.width;
    if (c.kv_dim == 0) c.kv_dim = c.width;
    return c;
  }

  std::size_t head_dim() const { return q_dim / n_heads; }
  std::size_t n_kv_heads() const { return kv_dim / head_dim(); }

  bool block_is_low_rank(std::size_t layer) const {
    if (ffn.kind != FfnKind::LowRank) return false;
    return !(layer == 0 && ffn.first_block_dense);
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Throws ConfigError naming the first violated invariant. Expects a
/// resolved config. Layer-free configs (embedding only) are allowed.
inline void validate(const ModelConfig& c, bool allow_full_rank = false) {
  auto fail = [](const std::string& msg) { throw ConfigError("invalid model config: " + msg); };
  if (c.width == 0) fail("width must be positive");
  if (c.vocab == 0) fail("vocab must be positive");
  if (c.seq_len == 0) fail("seq_len must be positive");
  if (c.n_layers == 0) return;
  if (c.intermediate == 0 || c.q_dim == 0 || c.kv_dim == 0) fail("unresolved dimension (call resolved())");
  if (c.n_heads == 0) fail("n_heads must be positive");
  if (c.q_dim % c.n_heads != 0) fail("q_dim must be divisible by n_heads");
  const std::size_t hd = c.q_dim / c.n_heads;
  if (hd % 2 != 0) fail("head_dim must be even for rotary pairs");
  if (c.kv_dim % hd != 0) fail("kv_dim must be a multiple of head_dim (n_kv_heads integral)");
  const std::size_t kv_heads = c.kv_dim / hd;
  if (kv_heads == 0 || c.n_heads % kv_heads != 0) fail("n_heads must be a multiple of n_kv_heads");
  if (c.rotary_base <= 0.0) fail("rotary_base must be positive");
  if (c.ffn.kind == FfnKind::LowRank) {
    const std::size_t cap = std::min(c.width, c.intermediate);
    if (c.ffn.rank == 0) fail("low-rank FFN needs rank >= 1");
    if (allow_full_rank ? c.ffn.rank > cap : c.ffn.rank >= cap) {
      fail("rank must be < min(width, intermediate) = " + std::to_string(cap));
    }
  }
}

// ---------------------------------------------------------------------------
// Presets: the four baseline sizes, their low-rank variants (via rank
// override), and the wide-and-structured / GQA comparison models.

inline std::optional<ModelConfig> preset(std::string_view name) {
  auto base = [](std::size_t d, std::size_t layers) {
    ModelConfig c;
    c.width = d;
    c.n_layers = layers;
    c.n_heads = d / 64;
    return c.resolved();
  };
  if (name == "s") return base(768, 12);
  if (name == "m") return base(1024, 24);
  if (name == "l") return base(1536, 24);
  if (name == "xl") return base(2048, 24);

  auto structured = [](std::size_t d, std::size_t inter, std::size_t q, std::size_t kv, std::optional<std::size_t> rank) {
    ModelConfig c;
    c.width = d;
    c.n_layers = 24;
    c.intermediate = inter;
    c.q_dim = q;
    c.kv_dim = kv;
    c.n_heads = q / 64;
    if (rank) c.ffn = FfnSpec::low_rank(*rank);
    return c.resolved();
  };
  if (name == "m-gqa") return structured(1024, 4864, 1024, 256, std::nullopt);
  if (name == "l-gqa") return structured(1536, 7424, 1536, 256, std::nullopt);
  if (name == "wide-m") return structured(1024, 4864, 512, 256, 512);
  if (name == "wide-l") return structured(1536, 7424, 768, 256, 768);
  return std::nullopt;
}

inline const std::vector<std::string>& preset_names() {
  static const std::vector<std::string> names{"s", "m", "l", "xl", "m-gqa", "l-gqa", "wide-m", "wide-l"};
  return names;
}

// ---------------------------------------------------------------------------
// Training hyperparameters. Only the peak learning rate, batch and step
// count vary across the baseline sizes; the rest are common defaults.

struct TrainConfig {
  double peak_lr = 6e-4;
  double warmup_frac = 0.01;
  double final_lr_frac = 0.1;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.1;
  double grad_clip = 1.0;  // global-norm clip, <= 0 disables
  bool decay_embedding = false;
  bool decay_norms = false;
  std::size_t global_batch_tokens = 1024;
  std::size_t micro_batch_tokens = 1024;
  std::size_t total_steps = 300;
  std::uint64_t seed = 0;
  bool repeat = false;  // wrap around the stream instead of failing

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

/// `seq_len` is the model context; batches are whole sequences.
inline void validate(const TrainConfig& t, std::size_t seq_len) {
  auto fail = [](const std::string& msg) { throw ConfigError("invalid train config: " + msg); };
  if (t.total_steps == 0) fail("total_steps must be positive");
  if (!(t.warmup_frac >= 0.0 && t.warmup_frac < 1.0)) fail("warmup_frac must be in [0, 1)");
  if (!(t.peak_lr >= 0.0)) fail("peak_lr must be non-negative");
  if (t.micro_batch_tokens == 0 || t.global_batch_tokens == 0) fail("batch sizes must be positive");
  if (t.global_batch_tokens % t.micro_batch_tokens != 0) fail("micro_batch_tokens must divide global_batch_tokens");
  if (t.micro_batch_tokens % seq_len != 0) fail("micro_batch_tokens must be a multiple of seq_len");
}

}  // namespace sffn
