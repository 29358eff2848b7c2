// SPDX-License-Identifier: Apache-2.0
//
// fastmem command line: synthetic streams, streaming runs and the optimizer,
// recall and reader analyses.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "fastmem/config.hpp"
#include "fastmem/error.hpp"
#include "fastmem/harness.hpp"
#include "fastmem/memory.hpp"
#include "fastmem/stream_io.hpp"

namespace fs = std::filesystem;
using namespace fastmem;
using nlohmann::json;
using nlohmann::ordered_json;

namespace {

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out = ".";
  std::string precision;
};

StreamConfig resolve_config(const Globals& g) {
  StreamConfig cfg = g.config.empty() ? StreamConfig{} : load_config(g.config);
  if (g.seed) cfg.seed = *g.seed;
  if (!g.precision.empty()) cfg.precision = parse_precision(g.precision);
  cfg.validate();
  return cfg;
}

fs::path out_dir(const Globals& g) {
  fs::path p(g.out);
  fs::create_directories(p);
  return p;
}

std::vector<double> parse_doubles(const std::string& list) {
  std::vector<double> out;
  std::stringstream ss(list);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    std::size_t used = 0;
    const double v = std::stod(item, &used);
    if (used != item.size()) throw ContractError("not a number: \"" + item + "\"");
    out.push_back(v);
  }
  return out;
}

std::vector<std::size_t> parse_counts(const std::string& list) {
  std::vector<std::size_t> out;
  for (double v : parse_doubles(list)) {
    if (v < 0 || v != std::floor(v)) throw ContractError("budgets must be non-negative integers");
    out.push_back(static_cast<std::size_t>(v));
  }
  return out;
}

std::vector<double> log_grid(double lo, double hi, std::size_t count) {
  if (!(lo > 0) || !(hi > lo) || count < 2) throw ContractError("norm grid needs 0 < min < max and count >= 2");
  std::vector<double> grid{0.0};
  for (std::size_t i = 0; i < count; ++i) {
    grid.push_back(lo * std::pow(hi / lo, static_cast<double>(i) / static_cast<double>(count - 1)));
  }
  return grid;
}

template <typename T>
ordered_json do_sweep(const StreamConfig& cfg, std::size_t samples, std::size_t warmup,
                      const std::vector<NamedOptimizer>& opts, const std::vector<double>& grid, const fs::path& out) {
  const auto s = sweep_samples<T>(cfg, samples, warmup);
  const auto rows = sweep_update_norm(s, opts, grid);
  write_file_atomic(out / "sweep.csv", sweep_to_csv(rows));
  ordered_json summary;
  summary["seed"] = cfg.seed;
  summary["samples"] = samples;
  summary["warmup"] = warmup;
  summary["csv"] = "sweep.csv";
  ordered_json per = ordered_json::object();
  for (const auto& o : opts) {
    const auto mins = min_loss_per_sample(rows, o.label);
    double mean = 0;
    for (double v : mins) mean += v;
    per[o.label] = {{"mean_min_loss", mins.empty() ? 0.0 : mean / static_cast<double>(mins.size())}};
  }
  summary["optimizers"] = per;
  return summary;
}

template <typename T>
ordered_json do_stats(const StreamConfig& cfg, const Stream& stream, const std::vector<NamedOptimizer>& opts,
                      double matched, const fs::path& out) {
  const auto layer = make_layer<T>(cfg);
  const auto w0 = make_initial_weights(cfg, layer);
  const auto batches = batches_from_stream<T>(stream, cfg.batch_size);
  const auto rows = ttt_statistics(batches, layer, w0, opts, matched);
  write_file_atomic(out / "ttt_stats.csv", stats_to_csv(rows));
  const auto means = mean_relative_change(rows, opts);
  ordered_json summary;
  summary["seed"] = cfg.seed;
  summary["steps"] = batches.size();
  summary["matched_norm"] = matched;
  summary["csv"] = "ttt_stats.csv";
  ordered_json per = ordered_json::object();
  for (std::size_t i = 0; i < opts.size(); ++i) per[opts[i].label] = {{"mean_relative_output_change", means[i]}};
  summary["optimizers"] = per;
  return summary;
}

template <typename T>
json do_recall(const StreamConfig& cfg, const Stream& stream, const std::vector<NamedOptimizer>& opts,
               const RecallOptions& ro) {
  const auto pairs = pairs_from_stream<T>(stream);
  json reports = json::array();
  for (const auto& o : opts) reports.push_back(recall_eval(cfg, pairs, o, ro).to_json());
  return reports;
}

void emit(const fs::path& path, const std::string& text) {
  write_file_atomic(path, text);
  std::cout << text;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"fastmem: test-time-training fast-weight memory toolkit"};
  app.require_subcommand(1);
  app.fallthrough();

  Globals g;
  app.add_option("--config", g.config, "JSON config file")->check(CLI::ExistingFile);
  app.add_option("--seed", g.seed, "Override the config seed");
  app.add_option("--out", g.out, "Output directory")->capture_default_str();
  app.add_option("--precision", g.precision, "Numeric precision")->check(CLI::IsMember({"f32", "f64"}));

  // gen-synthetic
  auto* gen = app.add_subcommand("gen-synthetic", "Write a synthetic VSTR stream and its metadata");
  std::string kind = "random";
  std::string name = "stream.vstr";
  gen->add_option("--kind", kind, "Stream kind")
      ->check(CLI::IsMember({"random", "associative-pairs", "needle"}))
      ->capture_default_str();
  gen->add_option("--name", name, "Stream file name inside --out")->capture_default_str();

  // stream-run
  auto* run = app.add_subcommand("stream-run", "Run a stream through the TTT layer and memory");
  std::string stream_path;
  bool wall_time = false;
  run->add_option("--stream", stream_path, "VSTR stream file")->required()->check(CLI::ExistingFile);
  run->add_flag("--record-wall-time", wall_time, "Record per-step wall time (breaks byte reproducibility)");

  // sweep-norm
  auto* sweep = app.add_subcommand("sweep-norm", "Loss vs. update norm per optimizer");
  std::size_t samples = 50, warmup = 10, norm_count = 33;
  std::string opt_list_sweep = "sgd,muon,hf2,hf3";
  std::string norms;
  double norm_min = 1e-4, norm_max = 10.0;
  sweep->add_option("--samples", samples, "Number of mini-batches")->capture_default_str();
  sweep->add_option("--warmup", warmup, "SGD warm-up steps before each sample")->capture_default_str();
  sweep->add_option("--optimizers", opt_list_sweep, "Comma-separated optimizer labels")->capture_default_str();
  sweep->add_option("--norms", norms, "Explicit ascending norm grid, comma-separated");
  sweep->add_option("--norm-min", norm_min)->capture_default_str();
  sweep->add_option("--norm-max", norm_max)->capture_default_str();
  sweep->add_option("--norm-count", norm_count)->capture_default_str();

  // ttt-stats
  auto* stats = app.add_subcommand("ttt-stats", "Per-step loss and relative output change at a matched norm");
  std::string opt_list_stats = "sgd,muon,hf";
  double matched = 0.1386;
  stats->add_option("--stream", stream_path, "VSTR stream file")->required()->check(CLI::ExistingFile);
  stats->add_option("--optimizers", opt_list_stats, "Comma-separated optimizer labels")->capture_default_str();
  stats->add_option("--matched-norm", matched, "Enforced per-step update norm")->capture_default_str();

  // recall-eval
  auto* recall = app.add_subcommand("recall-eval", "Associative recall probe against frozen weights");
  std::string opt_list_recall = "hf,sgd";
  RecallOptions ro;
  recall->add_option("--stream", stream_path, "associative-pairs stream")->required()->check(CLI::ExistingFile);
  recall->add_option("--optimizers", opt_list_recall, "Comma-separated optimizer labels")->capture_default_str();
  recall->add_option("--probes", ro.probe_count, "Keys to probe (0 = all)")->capture_default_str();
  recall->add_option("--warmup", ro.warmup_steps, "SGD warm-up steps before the pairs")->capture_default_str();
  recall->add_option("--warmup-batch", ro.warmup_batch, "Warm-up batch size")->capture_default_str();

  // reader-eval
  auto* reader = app.add_subcommand("reader-eval", "Compressed vs. full-cache decoding of a memory snapshot");
  std::string snapshot, budgets;
  PromptSpec prompt;
  std::optional<std::uint64_t> prompt_seed;
  reader->add_option("--snapshot", snapshot, "VSMS memory snapshot")->required()->check(CLI::ExistingFile);
  reader->add_option("--budgets", budgets, "Comma-separated M values (default N, N/2, N/4)");
  reader->add_option("--prompt-len", prompt.length)->capture_default_str();
  reader->add_option("--decode-steps", prompt.decode_steps)->capture_default_str();
  reader->add_option("--prompt-seed", prompt_seed, "Prompt seed (default: config seed)");

  CLI11_PARSE(app, argc, argv);

  try {
    const StreamConfig cfg = resolve_config(g);
    const fs::path out = out_dir(g);

    if (*gen) {
      const json meta = gen_synthetic_stream(cfg, parse_stream_kind(kind), out / name);
      std::cout << meta.dump(2) << "\n";
    } else if (*run) {
      RunOptions opts;
      opts.record_wall_time = wall_time;
      const RunFiles files = run_stream_files(cfg, stream_path, out, opts);
      const auto bytes = read_file_bytes(files.summary);
      std::cout << std::string(bytes.begin(), bytes.end());
    } else if (*sweep) {
      const auto opts = parse_optimizer_list(opt_list_sweep, cfg);
      const auto grid = norms.empty() ? log_grid(norm_min, norm_max, norm_count) : parse_doubles(norms);
      const ordered_json s = cfg.precision == Precision::f32
                                 ? do_sweep<float>(cfg, samples, warmup, opts, grid, out)
                                 : do_sweep<double>(cfg, samples, warmup, opts, grid, out);
      emit(out / "sweep.json", s.dump(2) + "\n");
    } else if (*stats) {
      const auto opts = parse_optimizer_list(opt_list_stats, cfg);
      const Stream stream = read_stream(stream_path);
      const ordered_json s = cfg.precision == Precision::f32 ? do_stats<float>(cfg, stream, opts, matched, out)
                                                             : do_stats<double>(cfg, stream, opts, matched, out);
      emit(out / "ttt_stats.json", s.dump(2) + "\n");
    } else if (*recall) {
      const auto opts = parse_optimizer_list(opt_list_recall, cfg);
      const Stream stream = read_stream(stream_path);
      const json r = cfg.precision == Precision::f32 ? do_recall<float>(cfg, stream, opts, ro)
                                                     : do_recall<double>(cfg, stream, opts, ro);
      emit(out / "recall.json", r.dump(2) + "\n");
    } else if (*reader) {
      const MemoryState<float> mem = read_snapshot(snapshot);
      const std::size_t n = mem.size();
      std::vector<std::size_t> m = budgets.empty() ? std::vector<std::size_t>{n, n / 2, n / 4} : parse_counts(budgets);
      std::erase(m, std::size_t{0});
      prompt.seed = prompt_seed.value_or(cfg.seed);
      ToyStackConfig sc = cfg.stack_config();
      const ReaderReport rep = reader_eval(to_double(mem.tokens), sc, cfg.reader_chunk, prompt, m);
      emit(out / "reader.json", rep.to_json().dump(2) + "\n");
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
