// Copyright 2026 The sffn Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <optional>
#include <stdexcept>
#include <string>

#include "sffn/model.hpp"
#include "sffn/optimizer.hpp"
#include "sffn/run_config.hpp"

// Checkpoint layout (all integers and floats little-endian):
//   "SFFNCKPT"  u32 version  u32 flags
//   u64 config_len, config text (key = value lines)
//   tensor set: u64 count, then per tensor u64 rows, u64 cols, rows*cols f64
//   if flags & 1: u64 step, u64 adam_t, tensor set (m), tensor set (v)

namespace sffn {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr std::array<char, 8> kCheckpointMagic{'S', 'F', 'F', 'N', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  TransformerLM<double> model;
  std::optional<AdamState<double>> optimizer;
  std::uint64_t step = 0;
};

namespace detail {

template <typename U>
void put_le(std::ostream& os, U v) {
  static_assert(std::is_integral_v<U>);
  for (std::size_t i = 0; i < sizeof(U); ++i) os.put(static_cast<char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xff));
}

template <typename U>
U get_le(std::istream& is) {
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    const int c = is.get();
    if (c == EOF) throw CheckpointError("checkpoint truncated");
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(c)) << (8 * i);
  }
  return static_cast<U>(v);
}

inline void put_tensors(std::ostream& os, const Weights<double>& w) {
  const auto list = tensor_list(w);
  put_le<std::uint64_t>(os, list.size());
  for (const auto& [name, m] : list) {
    put_le<std::uint64_t>(os, m->rows());
    put_le<std::uint64_t>(os, m->cols());
    for (double x : m->flat()) put_le(os, std::bit_cast<std::uint64_t>(x));
  }
}

// Reads into tensors already shaped like the expected model.
inline void get_tensors(std::istream& is, Weights<double>& w) {
  auto list = tensor_list(w);
  const auto count = get_le<std::uint64_t>(is);
  if (count != list.size()) {
    throw CheckpointError("checkpoint holds " + std::to_string(count) + " tensors, model expects " +
                          std::to_string(list.size()));
  }
  for (auto& [name, m] : list) {
    const auto rows = get_le<std::uint64_t>(is);
    const auto cols = get_le<std::uint64_t>(is);
    if (rows != m->rows() || cols != m->cols()) {
      throw CheckpointError("checkpoint tensor " + name + " has shape " + shape_str(rows, cols) + ", expected " +
                            shape_str(*m));
    }
    for (double& x : m->flat()) x = std::bit_cast<double>(get_le<std::uint64_t>(is));
  }
}

// Allocates a model of the right shape without drawing random numbers.
inline TransformerLM<double> shaped_model(const ModelConfig& c) {
  TransformerLM<double> m;
  m.config = c;
  m.weights.embedding = Matrix<double>(c.vocab, c.width);
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    Block<double> b;
    b.ln_attn = {Matrix<double>(1, c.width), Matrix<double>(1, c.width)};
    b.attn = {Matrix<double>(c.width, c.q_dim), Matrix<double>(c.width, c.kv_dim), Matrix<double>(c.width, c.kv_dim),
              Matrix<double>(c.q_dim, c.width)};
    b.ln_ffn = b.ln_attn;
    if (c.block_is_low_rank(l)) {
      const std::size_t r = c.ffn.rank;
      b.ffn = LowRankFfn<double>{Matrix<double>(c.width, r), Matrix<double>(r, c.intermediate),
                                 Matrix<double>(c.intermediate, r), Matrix<double>(r, c.width)};
    } else {
      b.ffn = DenseFfn<double>{Matrix<double>(c.width, c.intermediate), Matrix<double>(c.intermediate, c.width)};
    }
    m.weights.blocks.push_back(std::move(b));
  }
  if (c.n_layers > 0) m.weights.ln_final = {Matrix<double>(1, c.width), Matrix<double>(1, c.width)};
  return m;
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const TransformerLM<double>& model,
                            const AdamState<double>* optimizer = nullptr, std::uint64_t step = 0) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw CheckpointError("cannot open " + path + " for writing");
  os.write(kCheckpointMagic.data(), kCheckpointMagic.size());
  detail::put_le<std::uint32_t>(os, kCheckpointVersion);
  detail::put_le<std::uint32_t>(os, optimizer ? 1u : 0u);
  const std::string cfg = dump_model_config(model.config);
  detail::put_le<std::uint64_t>(os, cfg.size());
  os.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));
  detail::put_tensors(os, model.weights);
  if (optimizer) {
    detail::put_le<std::uint64_t>(os, step);
    detail::put_le<std::uint64_t>(os, optimizer->t);
    detail::put_tensors(os, optimizer->m);
    detail::put_tensors(os, optimizer->v);
  }
  if (!os) throw CheckpointError("write failed for " + path);
}

/// Restores a checkpoint. When `expected` is given, the stored model config
/// must match it exactly.
inline Checkpoint load_checkpoint(const std::string& path, const ModelConfig* expected = nullptr) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open " + path);
  std::array<char, 8> magic{};
  is.read(magic.data(), magic.size());
  if (!is || magic != kCheckpointMagic) throw CheckpointError(path + ": not a checkpoint (bad magic)");
  const auto version = detail::get_le<std::uint32_t>(is);
  if (version != kCheckpointVersion) {
    throw CheckpointError(path + ": unsupported checkpoint version " + std::to_string(version));
  }
  const auto flags = detail::get_le<std::uint32_t>(is);
  const auto cfg_len = detail::get_le<std::uint64_t>(is);
  if (cfg_len > (1u << 20)) throw CheckpointError(path + ": implausible config length");
  std::string cfg_text(cfg_len, '\0');
  is.read(cfg_text.data(), static_cast<std::streamsize>(cfg_len));
  if (!is) throw CheckpointError("checkpoint truncated");
  const ModelConfig config = parse_model_config(cfg_text);
  if (expected && !(*expected == config)) {
    throw CheckpointError(path + ": config mismatch; checkpoint has\n" + cfg_text);
  }
  validate(config, /*allow_full_rank=*/true);

  Checkpoint out;
  out.model = detail::shaped_model(config);
  detail::get_tensors(is, out.model.weights);
  if (flags & 1u) {
    out.step = detail::get_le<std::uint64_t>(is);
    AdamState<double> st = AdamState<double>::zeros_for(out.model.weights);
    st.t = detail::get_le<std::uint64_t>(is);
    detail::get_tensors(is, st.m);
    detail::get_tensors(is, st.v);
    out.optimizer = std::move(st);
  }
  return out;
}

}  // namespace sffn
