// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "fastmem/config.hpp"
#include "fastmem/memory.hpp"
#include "fastmem/stream_io.hpp"
#include "fastmem/ttt.hpp"

namespace fastmem {

/// Runs fn(0..n-1) on up to `threads` workers (0 = hardware concurrency).
/// Each index is processed exactly once; the first exception by index is
/// rethrown after all workers finish.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn, std::size_t threads = 0);

// ---------------------------------------------------------------------------
// Synthetic streams

enum class StreamKind : std::uint8_t { random, associative_pairs, needle };

const char* to_string(StreamKind k) noexcept;
StreamKind parse_stream_kind(std::string_view s);

struct GeneratedStream {
  Stream stream;
  nlohmann::json metadata;
};

/// random: `frames` frames of K visual (+ audio) tokens, entries N(0, token_std²).
/// associative-pairs: one frame per pair with two visual rows (key, value);
/// keys come from a fixed codebook of size `pairs`.
/// needle: a random stream with one planted token of norm 4·token_std·√d.
GeneratedStream generate_stream(const StreamConfig& cfg, StreamKind kind);

/// Writes the stream and its `<path>.json` metadata sidecar.
nlohmann::json gen_synthetic_stream(const StreamConfig& cfg, StreamKind kind,
                                    const std::filesystem::path& path);

/// Token matrix with entries N(0, std²) drawn from `rng`.
template <typename T>
Matrix<T> random_tokens(std::size_t rows, std::size_t dim, double std, std::mt19937_64& rng);

// ---------------------------------------------------------------------------
// Frame sources

class FrameSource {
 public:
  virtual ~FrameSource() = default;
  virtual std::uint32_t dim() const = 0;
  virtual std::optional<StreamFrame> next() = 0;
};

class FileFrameSource final : public FrameSource {
 public:
  explicit FileFrameSource(const std::filesystem::path& path) : reader_(path) {}
  std::uint32_t dim() const override { return reader_.dim(); }
  std::optional<StreamFrame> next() override { return reader_.next(); }

 private:
  StreamReader reader_;
};

class MemoryFrameSource final : public FrameSource {
 public:
  explicit MemoryFrameSource(const Stream& s) : stream_(s) {}
  std::uint32_t dim() const override { return stream_.dim; }
  std::optional<StreamFrame> next() override {
    if (pos_ == stream_.frames.size()) return std::nullopt;
    return stream_.frames[pos_++];
  }

 private:
  const Stream& stream_;
  std::size_t pos_ = 0;
};

/// Endless-style generator: `frames` random frames produced on demand.
class RandomFrameSource final : public FrameSource {
 public:
  RandomFrameSource(const StreamConfig& cfg, std::size_t frames);
  std::uint32_t dim() const override { return static_cast<std::uint32_t>(cfg_.dim); }
  std::optional<StreamFrame> next() override;

 private:
  StreamConfig cfg_;
  std::size_t frames_;
  std::size_t produced_ = 0;
  std::mt19937_64 rng_;
};

// ---------------------------------------------------------------------------
// Streaming pipeline

/// Slow parameters and W₀ derived from the config seed.
template <typename T>
TttLayerParams<T> make_layer(const StreamConfig& cfg);
template <typename T>
FastWeights<T> make_initial_weights(const StreamConfig& cfg, const TttLayerParams<T>& layer);

template <typename T>
using StepObserver = std::function<void(const TokenBatch<T>& batch, const FastWeights<T>& before,
                                        const StepResult<T>& result)>;

struct RunOptions {
  bool record_wall_time = false;
  /// When set, metrics are handed over step by step instead of being kept in
  /// RunResult::metrics.
  std::function<void(const StepMetrics&)> on_metrics;
};

template <typename T>
struct RunResult {
  std::vector<StepMetrics> metrics;
  MemoryState<T> memory;
  FastWeights<T> weights;
  std::size_t max_memory_rows = 0;  ///< largest row count seen after maintenance
  std::size_t state_bytes = 0;      ///< resident state after the last step
};

/// Visual tokens are grouped into TTT mini-batches of b rows across frame
/// boundaries; a frame's audio rows bypass the layer and enter memory right
/// after that frame's last visual memory token. A final partial batch is
/// flushed at the end of the stream.
template <typename T>
RunResult<T> run_stream(const StreamConfig& cfg, FrameSource& source, const RunOptions& options = {},
                        const StepObserver<T>& observer = {});

std::string metrics_to_jsonl(const std::vector<StepMetrics>& metrics);
StepMetrics metrics_from_json(const nlohmann::json& j);

struct RunFiles {
  std::filesystem::path metrics;
  std::filesystem::path snapshot;
  std::filesystem::path summary;
};

/// Runs `stream_path` at cfg.precision and writes metrics.jsonl, memory.vsms
/// and run.json into `out_dir`.
RunFiles run_stream_files(const StreamConfig& cfg, const std::filesystem::path& stream_path,
                          const std::filesystem::path& out_dir, const RunOptions& options = {});

// ---------------------------------------------------------------------------
// Optimizer analyses

struct NamedOptimizer {
  std::string label;
  OptimizerSpec spec;
};

/// "sgd", "muon", "hf" (config CG settings), "hf<k>" for k CG iterations, each
/// HF label optionally suffixed "-mlp" or "-ln".
NamedOptimizer parse_optimizer_label(std::string_view label, const StreamConfig& cfg);
std::vector<NamedOptimizer> parse_optimizer_list(std::string_view comma_list, const StreamConfig& cfg);

/// A single mini-batch with the layer state it is evaluated at.
template <typename T>
struct BatchSample {
  TttLayerParams<T> layer;
  FastWeights<T> weights;
  TokenBatch<T> batch;
};

/// Sample i: layer and W₀ from seed cfg.seed + i, `warmup` SGD steps on
/// fresh random batches, then the next random batch of b tokens.
template <typename T>
std::vector<BatchSample<T>> sweep_samples(const StreamConfig& cfg, std::size_t count, std::size_t warmup);

struct SweepRow {
  std::size_t sample = 0;
  std::string optimizer;
  double norm = 0;
  double loss = 0;
  double loss_before = 0;
  double natural_norm = 0;
};

/// For each sample and optimizer: the natural update rescaled to every grid
/// norm, reporting the reconstruction loss after the rescaled step.
template <typename T>
std::vector<SweepRow> sweep_update_norm(const std::vector<BatchSample<T>>& samples,
                                        const std::vector<NamedOptimizer>& optimizers,
                                        const std::vector<double>& norm_grid, std::size_t threads = 0);

/// Minimum loss over the grid per sample for one optimizer.
std::vector<double> min_loss_per_sample(const std::vector<SweepRow>& rows, std::string_view optimizer);

std::string sweep_to_csv(const std::vector<SweepRow>& rows);

struct StatsRow {
  std::size_t step = 0;
  std::string optimizer;
  double loss_before = 0;
  double loss_after = 0;
  double relative_output_change = 0;
  double update_norm = 0;
};

/// Visual tokens of a stream regrouped into batches of b rows.
template <typename T>
std::vector<TokenBatch<T>> batches_from_stream(const Stream& stream, std::size_t batch_size);

/// Each optimizer follows its own trajectory from `w0` with ‖ΔW_t‖ = matched_norm.
template <typename T>
std::vector<StatsRow> ttt_statistics(const std::vector<TokenBatch<T>>& batches,
                                     const TttLayerParams<T>& layer, const FastWeights<T>& w0,
                                     const std::vector<NamedOptimizer>& optimizers,
                                     double matched_norm, std::size_t threads = 0);

/// Mean relative output change per optimizer, in `optimizers` order.
std::vector<double> mean_relative_change(const std::vector<StatsRow>& rows,
                                         const std::vector<NamedOptimizer>& optimizers);

std::string stats_to_csv(const std::vector<StatsRow>& rows);

// ---------------------------------------------------------------------------
// Associative recall

template <typename T>
struct PairSet {
  Matrix<T> keys;
  Matrix<T> values;
};

/// Pairs of an associative-pairs stream: rows 0 and 1 of each frame.
template <typename T>
PairSet<T> pairs_from_stream(const Stream& stream);

struct RecallRow {
  std::size_t pair = 0;
  double updated_error = 0;
  double frozen_error = 0;
};

struct RecallReport {
  std::string optimizer;
  std::vector<RecallRow> rows;
  double mean_updated_error = 0;
  double mean_frozen_error = 0;
  double fraction_improved = 0;
  double most_recent_error = 0;
  std::uint64_t seed = 0;
  std::size_t warmup_steps = 0;

  nlohmann::json to_json() const;
};

struct RecallOptions {
  std::size_t probe_count = 0;     ///< 0 probes every pair, otherwise the first probe_count
  std::size_t warmup_steps = 10;   ///< SGD steps on random tokens before the pairs arrive
  std::size_t warmup_batch = 32;
};

/// W₀ is the fast-weight state when the pair stream starts: freshly
/// initialised weights after `warmup_steps` SGD steps on random tokens. All
/// pairs are then streamed through ttt_step_paired in batches of
/// cfg.batch_size, and ‖f(θ_K k; W) − θ_V v‖ / ‖θ_V v‖ is compared against the
/// same probe at frozen W₀.
template <typename T>
RecallReport recall_eval(const StreamConfig& cfg, const PairSet<T>& pairs,
                         const NamedOptimizer& optimizer, const RecallOptions& options = {});

// ---------------------------------------------------------------------------
// Reader

struct PromptSpec {
  std::size_t length = 8;
  std::size_t decode_steps = 4;
  std::uint64_t seed = 0;
};

struct ReaderRow {
  std::size_t avg_tokens = 0;  ///< M
  double ratio = 0;            ///< M / N
  std::size_t retained = 0;
  double max_abs_diff = 0;     ///< first-step logits vs. full cache
  double divergence = 0;       ///< ‖Δ logits‖₂ of the first step
  bool tokens_match = false;
};

struct ReaderReport {
  std::size_t memory_rows = 0;
  std::vector<ReaderRow> rows;

  nlohmann::json to_json() const;
};

/// Compressed vs. full-cache decoding per budget M. Raises NumericError if the
/// M = N budget is not equivalent to the full cache within 1e-6.
ReaderReport reader_eval(const Matrix<double>& memory, const ToyStackConfig& stack_config,
                         std::size_t chunk, const PromptSpec& prompt,
                         const std::vector<std::size_t>& budgets);

}  // namespace fastmem
