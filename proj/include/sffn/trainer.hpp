// Copyright 2026 The sffn Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <map>
#include <numeric>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "sffn/checkpoint.hpp"
#include "sffn/model.hpp"
#include "sffn/optimizer.hpp"
#include "sffn/token_stream.hpp"

namespace sffn {

struct TrainRecord {
  std::size_t step = 0;
  std::uint64_t tokens = 0;  // tokens seen after this step
  double loss = 0;           // mean training loss of the step, nats
  double lr = 0;

  friend bool operator==(const TrainRecord&, const TrainRecord&) = default;
};

struct TrainLog {
  std::vector<TrainRecord> records;

  void write_csv(std::ostream& os, bool header = true) const {
    if (header) os << "step,tokens,loss,lr\n";
    char buf[128];
    for (const auto& r : records) {
      std::snprintf(buf, sizeof buf, "%zu,%llu,%.17g,%.17g\n", r.step, static_cast<unsigned long long>(r.tokens),
                    r.loss, r.lr);
      os << buf;
    }
  }

  friend bool operator==(const TrainLog&, const TrainLog&) = default;
};

struct EvalResult {
  double loss = 0;
  double ppl = 1;
  std::size_t tokens = 0;
};

/// Mean next-token loss over non-overlapping windows of seq_len tokens,
/// scoring seq_len - 1 targets per window, up to max_tokens targets.
template <typename T>
EvalResult evaluate_ppl(const TransformerLM<T>& model, const TokenStream& stream, std::size_t max_tokens) {
  const std::size_t seq = model.config.seq_len;
  if (max_tokens < seq) throw std::invalid_argument("evaluate_ppl: max_tokens must be >= seq_len");
  if (stream.size() < 2) throw TokenStreamError("evaluate_ppl: stream has fewer than two tokens");
  const auto tokens = stream.tokens();
  double total = 0;
  std::size_t scored = 0;
  if (seq < 2) throw std::invalid_argument("evaluate_ppl: seq_len must be at least 2");
  for (std::size_t start = 0; start + 1 < tokens.size() && scored < max_tokens; start += seq) {
    std::size_t len = std::min(seq, tokens.size() - start);
    len = std::min(len, max_tokens - scored + 1);
    const auto window = tokens.subspan(start, len);
    const Matrix<T> logits = forward(model, window);
    total += cross_entropy_sum(logits, window);
    scored += len - 1;
  }
  EvalResult r;
  r.tokens = scored;
  r.loss = total / static_cast<double>(scored);
  r.ppl = std::exp(r.loss);
  return r;
}

/// Single-writer training loop. Sequence g of the run is window
/// perm_e[g mod W] of epoch e = g / W, where W = len / seq_len and
/// perm_e is a seeded shuffle, so any step's data depends only on
/// (seed, step). This is what makes resumed runs bit-identical.
class Trainer {
 public:
  using StepCallback = std::function<void(const TrainRecord&)>;

  Trainer(TransformerLM<double> model, TrainConfig cfg)
      : model_(std::move(model)), cfg_(cfg), opt_(AdamState<double>::zeros_for(model_.weights)) {
    validate(cfg_, model_.config.seq_len);
  }

  static Trainer resume(Checkpoint ckpt, TrainConfig cfg) {
    if (!ckpt.optimizer) throw CheckpointError("checkpoint has no optimizer state to resume from");
    Trainer t(std::move(ckpt.model), cfg);
    t.opt_ = std::move(*ckpt.optimizer);
    t.step_ = ckpt.step;
    return t;
  }

  const TransformerLM<double>& model() const { return model_; }
  TransformerLM<double>& model() { return model_; }
  const AdamState<double>& optimizer() const { return opt_; }
  std::size_t step() const { return step_; }
  const TrainConfig& config() const { return cfg_; }

  std::size_t sequences_per_step() const { return cfg_.global_batch_tokens / model_.config.seq_len; }

  /// Runs steps [step(), until) and appends one record per step.
  void run(const TokenStream& stream, std::size_t until, TrainLog& log, const StepCallback& on_step = {}) {
    if (until > cfg_.total_steps) throw std::out_of_range("Trainer::run: past total_steps");
    stream.check_vocab(model_.config.vocab);
    const std::size_t seq = model_.config.seq_len;
    if (stream.size() < seq) throw TokenStreamError("stream shorter than one training window");
    const std::size_t windows = stream.size() / seq;
    const std::size_t needed = until * sequences_per_step();
    if (!cfg_.repeat && needed > windows) {
      throw TokenStreamError("stream exhausted: " + std::to_string(until) + " steps need " + std::to_string(needed) +
                             " windows of " + std::to_string(seq) + " tokens, stream has " +
                             std::to_string(windows));
    }
    const std::size_t per_micro = cfg_.micro_batch_tokens / seq;
    const std::size_t targets = sequences_per_step() * (seq - 1);
    Weights<double> grad = zeros_like(model_.weights);
    std::vector<std::vector<Token>> micro(per_micro);

    for (; step_ < until; ++step_) {
      for_each_tensor(grad, [](const std::string&, Matrix<double>& m) { m.fill(0.0); });
      double loss = 0;
      const std::size_t first = step_ * sequences_per_step();
      for (std::size_t mb = 0; mb < sequences_per_step(); mb += per_micro) {
        for (std::size_t k = 0; k < per_micro; ++k) {
          const std::size_t w = window_index(first + mb + k, windows);
          const auto src = stream.tokens().subspan(w * seq, seq);
          micro[k].assign(src.begin(), src.end());
        }
        loss += loss_and_grad(model_, std::span<const std::vector<Token>>(micro), grad, targets);
      }
      clip_grad_norm(grad, cfg_.grad_clip);
      const double lr = lr_at(step_ + 1, cfg_);
      adamw_step(model_.weights, grad, opt_, lr, cfg_);
      TrainRecord rec{step_ + 1, static_cast<std::uint64_t>(step_ + 1) * cfg_.global_batch_tokens, loss, lr};
      if (!std::isfinite(loss)) throw NumericError("training loss became non-finite at step " + std::to_string(rec.step));
      log.records.push_back(rec);
      if (on_step) on_step(rec);
    }
  }

  void save(const std::string& path) const { save_checkpoint(path, model_, &opt_, step_); }

 private:
  std::size_t window_index(std::size_t g, std::size_t windows) {
    const std::size_t epoch = g / windows;
    auto it = perms_.find(epoch);
    if (it == perms_.end()) {
      std::vector<std::size_t> p(windows);
      std::iota(p.begin(), p.end(), 0);
      Rng rng = Rng(cfg_.seed).split(0x5EED0000ULL + epoch);
      for (std::size_t i = windows; i > 1; --i) std::swap(p[i - 1], p[rng.below(i)]);
      if (perms_.size() > 2) perms_.clear();
      it = perms_.emplace(epoch, std::move(p)).first;
    }
    return it->second[g % windows];
  }

  TransformerLM<double> model_;
  TrainConfig cfg_;
  AdamState<double> opt_;
  std::size_t step_ = 0;
  std::map<std::size_t, std::vector<std::size_t>> perms_;
};

/// Trains for cfg.total_steps from scratch; `model` is updated in place.
inline TrainLog train(TransformerLM<double>& model, const TokenStream& stream, const TrainConfig& cfg,
                      const Trainer::StepCallback& on_step = {}) {
  Trainer t(std::move(model), cfg);
  TrainLog log;
  t.run(stream, cfg.total_steps, log, on_step);
  model = std::move(t.model());
  return log;
}

}  // namespace sffn
