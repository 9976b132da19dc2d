// Copyright 2026 The sffn Authors
// SPDX-License-Identifier: Apache-2.0

// Command-line front end: parameter and FLOP accounting, training,
// evaluation, benchmarks, scaling fits and spectral-init inspection.

#include <CLI11.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "sffn/sffn.hpp"

namespace fs = std::filesystem;
using namespace sffn;

namespace {

constexpr int kUsageError = 1;
constexpr int kRuntimeError = 2;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Options shared by every subcommand that needs a model.
struct ModelArgs {
  std::string preset;
  std::string config_path;
  std::map<std::string, std::string> overrides;  // run-config key -> value
  bool dump = false;
  std::optional<std::string> out;
  std::optional<std::size_t> threads;
};

void add_model_options(CLI::App* app, ModelArgs& a) {
  app->add_option("--preset", a.preset, "Model preset")->check(CLI::IsMember(preset_names()));
  app->add_option("--config", a.config_path, "key = value config file")->check(CLI::ExistingFile);
  auto key = [&](const std::string& flag, const std::string& k, const std::string& help) {
    app->add_option_function<std::string>(flag, [&a, k](const std::string& v) { a.overrides[k] = v; }, help);
  };
  key("--width", "width", "Model width d");
  key("--layers", "layers", "Number of blocks");
  key("--vocab", "vocab", "Vocabulary size");
  key("--seq-len", "seq_len", "Context length");
  key("--intermediate", "intermediate", "FFN intermediate size (0 = 4d)");
  key("--heads", "heads", "Query heads");
  key("--q-dim", "q_dim", "Total query dimension (0 = d)");
  key("--kv-dim", "kv_dim", "Total key/value dimension (0 = d)");
  key("--ffn", "ffn", "dense or lowrank");
  key("--rank", "rank", "Low-rank FFN rank");
  key("--first-block-dense", "first_block_dense", "Keep block 0 dense (true/false)");
  key("--steps", "total_steps", "Training steps");
  key("--lr", "peak_lr", "Peak learning rate");
  key("--batch-tokens", "global_batch_tokens", "Tokens per optimizer step");
  key("--micro-batch-tokens", "micro_batch_tokens", "Tokens per micro-batch");
  key("--seed", "seed", "Random seed");
  key("--corpus", "corpus", "Token file (empty: built-in synthetic byte corpus)");
  key("--checkpoint", "checkpoint", "Checkpoint path");
  app->add_flag("--dump-config", a.dump, "Print the resolved config and exit");
  app->add_option("--out", a.out, "Output directory");
  app->add_option("--threads", a.threads, "Kernel threads (overrides SFFN_THREADS)")->check(CLI::PositiveNumber);
}

RunConfig resolve(const ModelArgs& a, bool need_model = true) {
  RunConfig cfg;
  if (!a.preset.empty()) cfg.model = *preset(a.preset);
  if (!a.config_path.empty()) cfg = load_run_config(a.config_path, cfg);
  for (const auto& [k, v] : a.overrides) set_key(cfg, k, v);
  if (a.out) cfg.out_dir = *a.out;
  cfg.model = cfg.model.resolved();
  if (need_model && cfg.model.width == 0) throw UsageError("no model: pass --preset, --config or --width");
  if (need_model) validate(cfg.model);
  if (a.threads) kernel_threads() = *a.threads;
  return cfg;
}

fs::path out_file(const RunConfig& cfg, const std::string& name) {
  fs::create_directories(cfg.out_dir);
  return fs::path(cfg.out_dir) / name;
}

std::ofstream open_out(const fs::path& p) {
  std::ofstream os(p);
  if (!os) throw std::runtime_error("cannot write " + p.string());
  return os;
}

TokenStream load_corpus(const RunConfig& cfg) {
  if (cfg.corpus.empty()) return synthetic_byte_corpus(2'000'000);
  return TokenStream::open(cfg.corpus);
}

std::vector<std::size_t> parse_sizes(const std::string& s) {
  std::vector<std::size_t> out;
  std::size_t pos = 0;
  while (pos <= s.size()) {
    const std::size_t comma = s.find(',', pos);
    const std::string part = s.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos);
    try {
      std::size_t used = 0;
      const unsigned long long v = std::stoull(part, &used);
      if (used != part.size() || v == 0) throw std::invalid_argument(part);
      out.push_back(static_cast<std::size_t>(v));
    } catch (const std::exception&) {
      throw UsageError("bad size list '" + s + "'");
    }
    if (comma == std::string::npos) break;
    pos = comma + 1;
  }
  return out;
}

void print_model_line(const ModelConfig& c) {
  std::printf("model: d=%zu L=%zu vocab=%zu inter=%zu heads=%zu q=%zu kv=%zu ffn=%s", c.width, c.n_layers, c.vocab,
              c.intermediate, c.n_heads, c.q_dim, c.kv_dim, c.ffn.kind == FfnKind::Dense ? "dense" : "lowrank");
  if (c.ffn.kind == FfnKind::LowRank) std::printf(" rank=%zu", c.ffn.rank);
  std::printf("\n");
}

// ---------------------------------------------------------------------------

int cmd_count(const ModelArgs& a) {
  const RunConfig cfg = resolve(a);
  const ParamBreakdown p = count_params(cfg.model);
  print_model_line(cfg.model);
  write_params_table(std::cout, p);
  if (a.out) {
    auto os = open_out(out_file(cfg, "params.csv"));
    write_params_csv(os, p);
  }
  return 0;
}

int cmd_flops(const ModelArgs& a, std::optional<double> tokens) {
  const RunConfig cfg = resolve(a);
  const double n = tokens ? *tokens : tokens_for_params(static_cast<double>(count_params(cfg.model).total));
  const FlopsBreakdown f = training_flops(cfg.model, n);
  print_model_line(cfg.model);
  write_flops_table(std::cout, f);
  if (a.out) {
    auto os = open_out(out_file(cfg, "flops.csv"));
    write_flops_csv(os, f);
  }
  return 0;
}

int cmd_plan(const ModelArgs& a, double budget, double batch_tokens) {
  const RunConfig cfg = resolve(a);
  const BudgetPlan plan = tokens_for_flops_budget(cfg.model, budget, batch_tokens);
  print_model_line(cfg.model);
  std::printf("params        %llu (%.2fM)\n", static_cast<unsigned long long>(plan.params),
              static_cast<double>(plan.params) / 1e6);
  std::printf("flops budget  %.4e\n", plan.flops_budget);
  std::printf("tokens        %.6e (%.1fB)\n", plan.tokens, plan.tokens_billions);
  std::printf("steps         %.0f at %.0f tokens/step\n", std::ceil(plan.steps), batch_tokens);
  return 0;
}

int cmd_train(const ModelArgs& a, std::optional<std::size_t> until, double eval_frac, std::size_t eval_tokens) {
  const RunConfig cfg = resolve(a);
  validate(cfg.train, cfg.model.seq_len);
  const TokenStream all = load_corpus(cfg);
  auto [train_stream, held_out] = all.split(eval_frac);
  const std::size_t stop = until.value_or(cfg.train.total_steps);

  const std::string ckpt = cfg.checkpoint.empty() ? out_file(cfg, "checkpoint.bin").string() : cfg.checkpoint;
  std::optional<Trainer> trainer;
  if (fs::exists(ckpt)) {
    trainer.emplace(Trainer::resume(load_checkpoint(ckpt, &cfg.model), cfg.train));
    std::printf("resumed from %s at step %zu\n", ckpt.c_str(), trainer->step());
  } else {
    Rng rng(cfg.train.seed);
    trainer.emplace(build_model(cfg.model, rng), cfg.train);
  }
  print_model_line(cfg.model);
  std::printf("params %llu, corpus %zu tokens (%zu held out)\n",
              static_cast<unsigned long long>(trainer->model().parameter_count()), all.size(), held_out.size());

  const fs::path log_path = out_file(cfg, "train_log.csv");
  const bool append = trainer->step() > 0 && fs::exists(log_path);
  std::ofstream log_os(log_path, append ? std::ios::app : std::ios::trunc);
  if (!log_os) throw std::runtime_error("cannot write " + log_path.string());
  TrainLog log;
  const std::size_t every = std::max<std::size_t>(1, cfg.train.total_steps / 20);
  trainer->run(train_stream, stop, log, [&](const TrainRecord& r) {
    TrainLog one{{r}};
    one.write_csv(log_os, !append && log.records.size() == 1);
    if (r.step % every == 0 || r.step == stop) std::printf("step %5zu  loss %.4f  lr %.3e\n", r.step, r.loss, r.lr);
  });

  trainer->save(ckpt);
  std::printf("checkpoint %s\n", ckpt.c_str());
  if (held_out.size() > cfg.model.seq_len) {
    const EvalResult e = evaluate_ppl(trainer->model(), held_out, std::max(eval_tokens, cfg.model.seq_len));
    std::printf("held-out loss %.4f  ppl %.3f  (%zu tokens)\n", e.loss, e.ppl, e.tokens);
  }
  return 0;
}

int cmd_eval(const ModelArgs& a, std::size_t max_tokens) {
  const RunConfig cfg = resolve(a, /*need_model=*/false);
  if (cfg.checkpoint.empty()) throw UsageError("eval needs --checkpoint");
  const Checkpoint ck = load_checkpoint(cfg.checkpoint);
  const TokenStream stream = load_corpus(cfg);
  const EvalResult e = evaluate_ppl(ck.model, stream, std::max(max_tokens, ck.model.config.seq_len));
  print_model_line(ck.model.config);
  std::printf("loss %.6f  ppl %.4f  tokens %zu\n", e.loss, e.ppl, e.tokens);
  return 0;
}

int cmd_bench_ffn(const ModelArgs& a, const std::string& widths, std::size_t tokens, std::size_t reps,
                  const std::string& gelu) {
  const RunConfig cfg = resolve(a, false);
  FfnBenchOptions opt;
  opt.n_tokens = tokens;
  opt.seq_len = cfg.model.seq_len;
  opt.timing.reps = reps;
  opt.gelu = gelu == "tanh" ? GeluMode::Tanh : GeluMode::Exact;
  const auto ws = parse_sizes(widths);
  const auto rows = bench_ffn(ws, default_ffn_variants(), opt);
  write_bench_csv(std::cout, rows);
  for (std::size_t w : ws) {
    std::printf("# width %zu speed-up vs dense: 0.625 %.2fx, 0.3125 %.2fx\n", w, speedup(rows, w, "lowrank-0.625"),
                speedup(rows, w, "lowrank-0.3125"));
  }
  if (a.out) {
    auto os = open_out(out_file(cfg, "bench_ffn.csv"));
    write_bench_csv(os, rows);
  }
  return 0;
}

int cmd_bench_gen(const ModelArgs& a, const std::string& batches, std::size_t prompt_len, std::size_t gen_len,
                  std::size_t memory_mb, std::size_t reps) {
  const RunConfig cfg = resolve(a);
  GenerationBenchOptions opt;
  opt.batch_sizes = parse_sizes(batches);
  opt.prompt_len = prompt_len;
  opt.gen_len = gen_len;
  opt.memory_budget_bytes = memory_mb << 20;
  opt.timing.reps = reps;
  Rng rng(cfg.train.seed);
  const TransformerLM<float> model = build_model(cfg.model, rng).cast<float>();
  const GenerationReport rep = bench_generation(model, opt, a.preset.empty() ? "model" : a.preset);
  write_bench_csv(std::cout, rep.per_batch);
  std::printf("# max throughput %.1f tokens/s (%s)\n", rep.best.tokens_per_s, rep.best.variant.c_str());
  if (a.out) {
    auto os = open_out(out_file(cfg, "bench_gen.csv"));
    write_bench_csv(os, rep.per_batch);
  }
  return 0;
}

int cmd_fit_scaling(const std::string& input, const std::optional<std::string>& out) {
  std::ifstream is(input);
  if (!is) throw std::runtime_error("cannot open " + input);
  std::vector<ScalingFit> fits;
  for (const auto& [label, pts] : group_by_label(read_scaling_csv(is))) fits.push_back(fit_power_law(pts, label));
  const SlopeComparison cmp = compare_slopes(fits);
  write_fit_report(std::cout, cmp);
  if (out) {
    fs::create_directories(*out);
    auto os = open_out(fs::path(*out) / "scaling_fits.csv");
    write_fit_csv(os, cmp.by_slope);
  }
  return 0;
}

// Factorizes the dense twin's FFN weights and reports how close each
// rank-R product is to the best achievable error.
int cmd_inspect_init(const ModelArgs& a) {
  const RunConfig cfg = resolve(a);
  const ModelConfig& c = cfg.model;
  if (c.ffn.kind != FfnKind::LowRank) throw UsageError("inspect-init needs --ffn lowrank and --rank");
  ModelConfig dense_cfg = c;
  dense_cfg.ffn = FfnSpec::dense();
  Rng rng(cfg.train.seed);
  const TransformerLM<double> dense = build_model(dense_cfg, rng);
  print_model_line(c);
  std::printf("%-6s %-6s %14s %14s %12s %12s\n", "block", "matrix", "rel_error", "optimal", "|U|_F", "|V|_F");
  std::ostringstream csv;
  csv << "block,matrix,rel_error,optimal_rel_error,u_norm,v_norm\n";
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    if (!c.block_is_low_rank(l)) continue;
    const auto& ffn = std::get<DenseFfn<double>>(dense.weights.blocks[l].ffn);
    for (const auto& [name, w] : {std::pair{"up", &ffn.w_up}, std::pair{"down", &ffn.w_down}}) {
      const SvdResult s = svd_thin(*w);
      const FactorPair f = spectral_init(*w, c.ffn.rank);
      double tail = 0, total = 0;
      for (std::size_t i = 0; i < s.sigma.size(); ++i) {
        total += s.sigma[i] * s.sigma[i];
        if (i >= c.ffn.rank) tail += s.sigma[i] * s.sigma[i];
      }
      const double err = frobenius_norm(subtract(*w, matmul(f.u, f.v))) / std::sqrt(total);
      const double opt = std::sqrt(tail / total);
      std::printf("%-6zu %-6s %14.6e %14.6e %12.4f %12.4f\n", l, name, err, opt, frobenius_norm(f.u),
                  frobenius_norm(f.v));
      char buf[256];
      std::snprintf(buf, sizeof buf, "%zu,%s,%.17g,%.17g,%.17g,%.17g\n", l, name, err, opt, frobenius_norm(f.u),
                    frobenius_norm(f.v));
      csv << buf;
    }
  }
  if (a.out) {
    auto os = open_out(out_file(cfg, "inspect_init.csv"));
    os << csv.str();
  }
  return 0;
}

int cmd_corpus(std::size_t tokens, std::uint64_t seed, const std::string& path) {
  const TokenStream s = synthetic_byte_corpus(tokens, seed);
  if (const auto parent = fs::path(path).parent_path(); !parent.empty()) fs::create_directories(parent);
  s.save(path);
  std::printf("wrote %zu tokens (vocab %zu) to %s\n", s.size(), kByteVocab, path.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Low-rank FFN transformer toolkit"};
  app.require_subcommand(1);

  ModelArgs count_a, flops_a, plan_a, train_a, eval_a, ffn_a, gen_a, init_a;

  auto* count = app.add_subcommand("count", "Parameter breakdown");
  add_model_options(count, count_a);

  auto* flops = app.add_subcommand("flops", "Training FLOPs breakdown");
  add_model_options(flops, flops_a);
  std::optional<double> flops_tokens;
  flops->add_option("--tokens", flops_tokens, "Training tokens (default: 20 x params)");

  auto* plan = app.add_subcommand("plan", "Token budget for a FLOPs budget");
  add_model_options(plan, plan_a);
  double budget = 0, plan_batch = 0.5e6;
  plan->add_option("--budget", budget, "Training FLOPs budget")->required()->check(CLI::PositiveNumber);
  plan->add_option("--step-tokens", plan_batch, "Tokens per optimizer step")->check(CLI::PositiveNumber);

  auto* train = app.add_subcommand("train", "Train a model");
  add_model_options(train, train_a);
  std::optional<std::size_t> until;
  double eval_frac = 0.05;
  std::size_t train_eval_tokens = 65536;
  train->add_option("--until", until, "Stop after this step (for staged runs)");
  train->add_option("--eval-frac", eval_frac, "Held-out fraction of the corpus")->check(CLI::Range(0.0, 0.5));
  train->add_option("--eval-tokens", train_eval_tokens, "Held-out tokens to score");

  auto* eval = app.add_subcommand("eval", "Perplexity of a checkpoint");
  add_model_options(eval, eval_a);
  std::size_t eval_tokens = 65536;
  eval->add_option("--max-tokens", eval_tokens, "Tokens to score");

  auto* bffn = app.add_subcommand("bench-ffn", "FFN latency across widths");
  add_model_options(bffn, ffn_a);
  std::string widths = "256,512,1024";
  std::size_t bench_tokens = 30000, ffn_reps = 5;
  std::string gelu = "exact";
  bffn->add_option("--widths", widths, "Comma-separated widths");
  bffn->add_option("--tokens", bench_tokens, "Tokens per forward pass")->check(CLI::PositiveNumber);
  bffn->add_option("--reps", ffn_reps, "Timed repetitions (>= 5)")->check(CLI::Range(5, 1000));
  bffn->add_option("--gelu", gelu, "exact or tanh")->check(CLI::IsMember({"exact", "tanh"}));

  auto* bgen = app.add_subcommand("bench-gen", "Generation throughput with a KV cache");
  add_model_options(bgen, gen_a);
  std::string batches = "1,2,4,8,16,32,64";
  std::size_t prompt_len = 16, gen_len = 256, memory_mb = 1024, gen_reps = 5;
  bgen->add_option("--batch", batches, "Comma-separated batch sizes");
  bgen->add_option("--prompt-len", prompt_len, "Prompt tokens")->check(CLI::PositiveNumber);
  bgen->add_option("--gen-len", gen_len, "Generated tokens")->check(CLI::PositiveNumber);
  bgen->add_option("--memory-mb", memory_mb, "KV cache budget in MiB");
  bgen->add_option("--reps", gen_reps, "Timed repetitions (>= 5)")->check(CLI::Range(5, 1000));

  auto* fit = app.add_subcommand("fit-scaling", "Power-law fits of loss vs FLOPs");
  std::string fit_input;
  std::optional<std::string> fit_out;
  fit->add_option("input", fit_input, "CSV with label,flops,loss")->required()->check(CLI::ExistingFile);
  fit->add_option("--out", fit_out, "Output directory");

  auto* init = app.add_subcommand("inspect-init", "Spectral-init error per FFN matrix");
  add_model_options(init, init_a);

  auto* corpus = app.add_subcommand("corpus", "Write the synthetic byte corpus");
  std::size_t corpus_tokens = 2'000'000;
  std::uint64_t corpus_seed = 7;
  std::string corpus_path = "data/corpus.toks";
  corpus->add_option("--tokens", corpus_tokens, "Corpus length")->check(CLI::PositiveNumber);
  corpus->add_option("--seed", corpus_seed, "Generator seed");
  corpus->add_option("--path", corpus_path, "Output token file");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kUsageError;
  }

  auto dump_if_requested = [](const ModelArgs& a) {
    if (!a.dump) return false;
    std::cout << dump_run_config(resolve(a, false));
    return true;
  };

  try {
    for (auto [sub, args] : {std::pair{count, &count_a}, std::pair{flops, &flops_a}, std::pair{plan, &plan_a},
                             std::pair{train, &train_a}, std::pair{eval, &eval_a}, std::pair{bffn, &ffn_a},
                             std::pair{bgen, &gen_a}, std::pair{init, &init_a}}) {
      if (sub->parsed() && dump_if_requested(*args)) return 0;
    }
    if (count->parsed()) return cmd_count(count_a);
    if (flops->parsed()) return cmd_flops(flops_a, flops_tokens);
    if (plan->parsed()) return cmd_plan(plan_a, budget, plan_batch);
    if (train->parsed()) return cmd_train(train_a, until, eval_frac, train_eval_tokens);
    if (eval->parsed()) return cmd_eval(eval_a, eval_tokens);
    if (bffn->parsed()) return cmd_bench_ffn(ffn_a, widths, bench_tokens, ffn_reps, gelu);
    if (bgen->parsed()) return cmd_bench_gen(gen_a, batches, prompt_len, gen_len, memory_mb, gen_reps);
    if (fit->parsed()) return cmd_fit_scaling(fit_input, fit_out);
    if (init->parsed()) return cmd_inspect_init(init_a);
    if (corpus->parsed()) return cmd_corpus(corpus_tokens, corpus_seed, corpus_path);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n" << app.help();
    return kUsageError;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsageError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntimeError;
  }
  return kUsageError;
}
