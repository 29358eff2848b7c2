// SPDX-License-Identifier: Apache-2.0

#include "fastmem/harness.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <deque>
#include <exception>
#include <fstream>
#include <limits>
#include <sstream>
#include <thread>

#include "fastmem/error.hpp"

namespace fastmem {

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

/// Independent stream of seeds per purpose.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t tag) {
  return splitmix64(splitmix64(seed) ^ (tag * 0xD1B54A32D192ED03ULL));
}

enum SeedTag : std::uint64_t { kLayer = 1, kWeights = 2, kTokens = 3, kCodebook = 4, kNeedle = 5, kPrompt = 6, kWarmup = 7 };

template <typename T>
Matrix<T> row_block(const Matrix<T>& m, std::size_t first, std::size_t count) {
  const auto v = m.values();
  std::vector<T> data(v.begin() + static_cast<std::ptrdiff_t>(first * m.cols()),
                      v.begin() + static_cast<std::ptrdiff_t>((first + count) * m.cols()));
  return Matrix<T>::from_data(count, m.cols(), std::move(data), false);
}

template <typename T>
Matrix<T> from_float(const Matrix<float>& m) {
  if constexpr (std::is_same_v<T, float>) {
    return m;
  } else {
    return to_double(m);
  }
}

std::string format_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace

void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn, std::size_t threads) {
  if (n == 0) return;
  if (threads == 0) threads = std::max(1u, std::thread::hardware_concurrency());
  threads = std::min(threads, n);
  std::vector<std::exception_ptr> errors(n);
  auto run = [&](std::size_t i) {
    try {
      fn(i);
    } catch (...) {
      errors[i] = std::current_exception();
    }
  };
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) run(i);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    pool.reserve(threads);
    for (std::size_t t = 0; t < threads; ++t) {
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < n; i = next++) run(i);
      });
    }
    for (auto& th : pool) th.join();
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

// ---------------------------------------------------------------------------

const char* to_string(StreamKind k) noexcept {
  switch (k) {
    case StreamKind::random: return "random";
    case StreamKind::associative_pairs: return "associative-pairs";
    case StreamKind::needle: return "needle";
  }
  return "?";
}

StreamKind parse_stream_kind(std::string_view s) {
  if (s == "random") return StreamKind::random;
  if (s == "associative-pairs") return StreamKind::associative_pairs;
  if (s == "needle") return StreamKind::needle;
  throw ContractError("stream kind must be random, associative-pairs or needle, got \"" +
                      std::string(s) + "\"");
}

template <typename T>
Matrix<T> random_tokens(std::size_t rows, std::size_t dim, double std, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, std);
  Matrix<T> m(rows, dim);
  for (auto& v : m.values()) v = static_cast<T>(normal(rng));
  return m;
}

GeneratedStream generate_stream(const StreamConfig& cfg, StreamKind kind) {
  cfg.validate();
  const std::size_t d = cfg.dim;
  std::mt19937_64 rng(derive_seed(cfg.seed, kTokens));
  GeneratedStream g;
  g.stream.dim = static_cast<std::uint32_t>(d);
  ordered_json meta;
  meta["format"] = "VSTR";
  meta["version"] = 1;
  meta["kind"] = to_string(kind);
  meta["seed"] = cfg.seed;
  meta["dim"] = d;
  meta["frame_rate"] = cfg.frame_rate;
  meta["token_std"] = cfg.token_std;

  switch (kind) {
    case StreamKind::random:
    case StreamKind::needle: {
      for (std::size_t f = 0; f < cfg.frames; ++f) {
        StreamFrame frame;
        frame.visual = random_tokens<float>(cfg.tokens_per_frame, d, cfg.token_std, rng);
        frame.audio = random_tokens<float>(cfg.audio_tokens_per_frame, d, cfg.token_std, rng);
        g.stream.frames.push_back(std::move(frame));
      }
      meta["frames"] = cfg.frames;
      meta["tokens_per_frame"] = cfg.tokens_per_frame;
      meta["audio_tokens_per_frame"] = cfg.audio_tokens_per_frame;
      if (kind == StreamKind::needle && cfg.frames > 0) {
        std::mt19937_64 nrng(derive_seed(cfg.seed, kNeedle));
        const std::size_t nf = std::uniform_int_distribution<std::size_t>(0, cfg.frames - 1)(nrng);
        const std::size_t nr = std::uniform_int_distribution<std::size_t>(0, cfg.tokens_per_frame - 1)(nrng);
        Matrix<double> dir = random_tokens<double>(1, d, 1.0, nrng);
        const double n = norm2<double>(dir.row(0));
        const double scale = 4.0 * cfg.token_std * std::sqrt(static_cast<double>(d)) / n;
        auto row = g.stream.frames[nf].visual.row(nr);
        for (std::size_t k = 0; k < d; ++k) row[k] = static_cast<float>(dir(0, k) * scale);
        meta["needle_frame"] = nf;
        meta["needle_row"] = nr;
      }
      break;
    }
    case StreamKind::associative_pairs: {
      std::mt19937_64 crng(derive_seed(cfg.seed, kCodebook));
      const Matrix<float> codebook = random_tokens<float>(cfg.pairs, d, cfg.token_std, crng);
      for (std::size_t p = 0; p < cfg.pairs; ++p) {
        StreamFrame frame;
        frame.visual = Matrix<float>(2, d);
        const Matrix<float> value = random_tokens<float>(1, d, cfg.token_std, rng);
        for (std::size_t k = 0; k < d; ++k) {
          frame.visual(0, k) = codebook(p, k);
          frame.visual(1, k) = value(0, k);
        }
        frame.audio = Matrix<float>(0, d);
        g.stream.frames.push_back(std::move(frame));
      }
      meta["frames"] = cfg.pairs;
      meta["pair_count"] = cfg.pairs;
      meta["codebook_size"] = cfg.pairs;
      meta["rows_per_pair"] = 2;
      break;
    }
  }
  g.metadata = json(meta);
  return g;
}

json gen_synthetic_stream(const StreamConfig& cfg, StreamKind kind, const fs::path& path) {
  GeneratedStream g = generate_stream(cfg, kind);
  write_stream(path, g.stream);
  write_metadata(path, g.metadata);
  return g.metadata;
}

RandomFrameSource::RandomFrameSource(const StreamConfig& cfg, std::size_t frames)
    : cfg_(cfg), frames_(frames), rng_(derive_seed(cfg.seed, kTokens)) {
  cfg_.validate();
}

std::optional<StreamFrame> RandomFrameSource::next() {
  if (produced_ == frames_) return std::nullopt;
  ++produced_;
  StreamFrame f;
  f.visual = random_tokens<float>(cfg_.tokens_per_frame, cfg_.dim, cfg_.token_std, rng_);
  f.audio = random_tokens<float>(cfg_.audio_tokens_per_frame, cfg_.dim, cfg_.token_std, rng_);
  return f;
}

// ---------------------------------------------------------------------------

template <typename T>
TttLayerParams<T> make_layer(const StreamConfig& cfg) {
  cfg.validate();
  return TttLayerParams<T>::make(cfg.dim, cfg.ttt_heads, cfg.hidden(), derive_seed(cfg.seed, kLayer),
                                 static_cast<T>(cfg.base_lr), static_cast<T>(cfg.projection_noise));
}

template <typename T>
FastWeights<T> make_initial_weights(const StreamConfig& cfg, const TttLayerParams<T>& layer) {
  return init_fast_weights(layer, derive_seed(cfg.seed, kWeights));
}

template <typename T>
RunResult<T> run_stream(const StreamConfig& cfg, FrameSource& source, const RunOptions& options,
                        const StepObserver<T>& observer) {
  cfg.validate();
  const std::size_t d = cfg.dim;
  if (source.dim() != d && source.dim() != 0) {
    throw DimensionError("stream dim " + std::to_string(source.dim()) + " differs from config dim " +
                         std::to_string(d));
  }
  const std::size_t b = cfg.batch_size;
  const TttLayerParams<T> layer = make_layer<T>(cfg);

  RunResult<T> res;
  res.weights = make_initial_weights(cfg, layer);
  res.memory = MemoryState<T>::empty(cfg.memory_budget, d);
  const std::size_t cap = cfg.memory_budget + b + cfg.audio_tokens_per_frame;
  res.memory.tokens.reserve_rows(cap);
  res.memory.provenance.reserve(cap);

  std::vector<T> pending;
  pending.reserve(b * d);
  std::vector<std::uint64_t> pending_frame;
  pending_frame.reserve(b);
  struct QueuedAudio {
    std::uint64_t frame;
    Matrix<T> rows;
  };
  std::deque<QueuedAudio> audio;
  std::uint64_t step = 0;
  std::uint64_t frame_index = 0;
  constexpr std::uint64_t kNone = std::numeric_limits<std::uint64_t>::max();

  auto track = [&] { res.max_memory_rows = std::max(res.max_memory_rows, res.memory.size()); };
  auto release_audio = [&](std::uint64_t limit) {
    while (!audio.empty() && audio.front().frame < limit) {
      append_audio(res.memory, audio.front().rows, audio.front().frame);
      audio.pop_front();
      track();
    }
  };
  auto flush = [&](std::size_t n) {
    std::vector<T> rows(pending.begin(), pending.begin() + static_cast<std::ptrdiff_t>(n * d));
    TokenBatch<T> batch = TokenBatch<T>::visual(Matrix<T>::from_data(n, d, std::move(rows)), step);
    const auto t0 = std::chrono::steady_clock::now();
    StepResult<T> r = ttt_step(batch, res.weights, layer, cfg.optimizer);
    if (options.record_wall_time) {
      r.metrics.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    }
    r.metrics.step = step;
    if (observer) observer(batch, res.weights, r);
    if (options.on_metrics) {
      options.on_metrics(r.metrics);
    } else {
      res.metrics.push_back(r.metrics);
    }

    for (std::size_t i = 0; i < n;) {
      const std::uint64_t f = pending_frame[i];
      std::size_t j = i;
      while (j < n && pending_frame[j] == f) ++j;
      const std::vector<Provenance> prov(j - i, Provenance{f, Modality::visual});
      append_and_discard(res.memory, row_block(r.output, i, j - i), prov);
      track();
      const std::uint64_t next =
          j < n ? pending_frame[j] : (n < pending_frame.size() ? pending_frame[n] : kNone);
      release_audio(next);
      i = j;
    }
    pending.erase(pending.begin(), pending.begin() + static_cast<std::ptrdiff_t>(n * d));
    pending_frame.erase(pending_frame.begin(), pending_frame.begin() + static_cast<std::ptrdiff_t>(n));
    res.weights = std::move(r.weights);
    ++step;
  };

  while (auto frame = source.next()) {
    if ((frame->visual.rows() > 0 && frame->visual.cols() != d) ||
        (frame->audio.rows() > 0 && frame->audio.cols() != d)) {
      throw DimensionError("frame width differs from config dim");
    }
    for (std::size_t r = 0; r < frame->visual.rows(); ++r) {
      for (float v : frame->visual.row(r)) pending.push_back(static_cast<T>(v));
      pending_frame.push_back(frame_index);
      if (pending_frame.size() == b) flush(b);
    }
    if (frame->audio.rows() > 0) audio.push_back({frame_index, from_float<T>(frame->audio)});
    release_audio(pending_frame.empty() ? kNone : pending_frame.front());
    ++frame_index;
  }
  if (!pending_frame.empty()) flush(pending_frame.size());
  release_audio(kNone);

  res.state_bytes = res.memory.footprint_bytes() + res.weights.footprint_bytes() +
                    pending.capacity() * sizeof(T) + pending_frame.capacity() * sizeof(std::uint64_t);
  return res;
}

std::string metrics_to_jsonl(const std::vector<StepMetrics>& metrics) {
  std::string out;
  for (const auto& m : metrics) {
    ordered_json j;
    j["step"] = m.step;
    j["loss_before"] = m.loss_before;
    j["loss_after"] = m.loss_after;
    j["update_norm"] = m.update_norm;
    j["relative_output_change"] = m.relative_output_change;
    j["cg_iterations"] = m.cg_iterations;
    j["wall_time"] = m.wall_time;
    out += j.dump();
    out += '\n';
  }
  return out;
}

StepMetrics metrics_from_json(const json& j) {
  static const std::vector<std::string> fields = {"step", "loss_before", "loss_after", "update_norm",
                                                  "relative_output_change", "cg_iterations", "wall_time"};
  if (!j.is_object() || j.size() != fields.size()) throw ContractError("metrics record: wrong field set");
  for (const auto& f : fields) {
    if (!j.contains(f)) throw ContractError("metrics record: missing field " + f);
  }
  StepMetrics m;
  m.step = j.at("step").get<std::uint64_t>();
  m.loss_before = j.at("loss_before").get<double>();
  m.loss_after = j.at("loss_after").get<double>();
  m.update_norm = j.at("update_norm").get<double>();
  m.relative_output_change = j.at("relative_output_change").get<double>();
  m.cg_iterations = j.at("cg_iterations").get<std::size_t>();
  m.wall_time = j.at("wall_time").get<double>();
  return m;
}

namespace {

template <typename T>
RunFiles run_files_impl(const StreamConfig& cfg, const fs::path& stream_path, const fs::path& out_dir,
                        RunOptions options) {
  fs::create_directories(out_dir);
  RunFiles files{out_dir / "metrics.jsonl", out_dir / "memory.vsms", out_dir / "run.json"};
  fs::path tmp = files.metrics;
  tmp += ".tmp";
  std::ofstream metrics_out(tmp, std::ios::binary | std::ios::trunc);
  if (!metrics_out) throw std::runtime_error("cannot write " + tmp.string());
  std::size_t steps = 0;
  options.on_metrics = [&](const StepMetrics& m) {
    metrics_out << metrics_to_jsonl({m});
    ++steps;
  };
  FileFrameSource source(stream_path);
  RunResult<T> res = run_stream<T>(cfg, source, options);
  metrics_out.close();
  if (!metrics_out) throw std::runtime_error("write failed: " + tmp.string());
  fs::rename(tmp, files.metrics);
  write_snapshot(files.snapshot, res.memory);

  ordered_json summary;
  summary["stream"] = stream_path.filename().string();
  summary["seed"] = cfg.seed;
  summary["precision"] = to_string(cfg.precision);
  summary["steps"] = steps;
  summary["memory_rows"] = res.memory.size();
  summary["max_memory_rows"] = res.max_memory_rows;
  summary["state_bytes"] = res.state_bytes;
  summary["config"] = config_to_json(cfg);
  write_file_atomic(files.summary, summary.dump(2) + "\n");
  return files;
}

}  // namespace

RunFiles run_stream_files(const StreamConfig& cfg, const fs::path& stream_path, const fs::path& out_dir,
                          const RunOptions& options) {
  if (cfg.precision == Precision::f32) return run_files_impl<float>(cfg, stream_path, out_dir, options);
  return run_files_impl<double>(cfg, stream_path, out_dir, options);
}

// ---------------------------------------------------------------------------

NamedOptimizer parse_optimizer_label(std::string_view label, const StreamConfig& cfg) {
  NamedOptimizer n{std::string(label), cfg.optimizer};
  std::string_view base = label;
  std::optional<JacobianMode> mode;
  if (base.ends_with("-ln")) {
    mode = JacobianMode::ln;
    base.remove_suffix(3);
  } else if (base.ends_with("-mlp")) {
    mode = JacobianMode::mlp;
    base.remove_suffix(4);
  }
  if (base == "sgd" && !mode) {
    n.spec.kind = OptimizerKind::sgd;
  } else if (base == "muon" && !mode) {
    n.spec.kind = OptimizerKind::muon;
  } else if (base.starts_with("hf")) {
    n.spec.kind = OptimizerKind::hf;
    const std::string_view digits = base.substr(2);
    if (!digits.empty()) {
      std::size_t k = 0;
      for (char c : digits) {
        if (c < '0' || c > '9') throw ContractError("unknown optimizer label \"" + std::string(label) + "\"");
        k = k * 10 + static_cast<std::size_t>(c - '0');
      }
      n.spec.cg.max_iters = k;
    }
    if (mode) n.spec.cg.curvature = *mode;
  } else {
    throw ContractError("unknown optimizer label \"" + std::string(label) + "\"");
  }
  n.spec.validate();
  return n;
}

std::vector<NamedOptimizer> parse_optimizer_list(std::string_view list, const StreamConfig& cfg) {
  std::vector<NamedOptimizer> out;
  while (!list.empty()) {
    const auto comma = list.find(',');
    const std::string_view item = list.substr(0, comma);
    if (!item.empty()) out.push_back(parse_optimizer_label(item, cfg));
    if (comma == std::string_view::npos) break;
    list.remove_prefix(comma + 1);
  }
  if (out.empty()) throw ContractError("optimizer list is empty");
  return out;
}

template <typename T>
std::vector<BatchSample<T>> sweep_samples(const StreamConfig& cfg, std::size_t count, std::size_t warmup) {
  cfg.validate();
  std::vector<BatchSample<T>> out(count);
  parallel_for(count, [&](std::size_t i) {
    StreamConfig c = cfg;
    c.seed = cfg.seed + i;
    BatchSample<T>& s = out[i];
    s.layer = make_layer<T>(c);
    s.weights = make_initial_weights(c, s.layer);
    std::mt19937_64 rng(derive_seed(c.seed, kTokens));
    for (std::size_t t = 0; t < warmup; ++t) {
      const auto batch = TokenBatch<T>::visual(random_tokens<T>(c.batch_size, c.dim, c.token_std, rng), t);
      s.weights = ttt_step(batch, s.weights, s.layer, OptimizerSpec::sgd()).weights;
    }
    s.batch = TokenBatch<T>::visual(random_tokens<T>(c.batch_size, c.dim, c.token_std, rng), warmup);
  });
  return out;
}

template <typename T>
std::vector<SweepRow> sweep_update_norm(const std::vector<BatchSample<T>>& samples,
                                        const std::vector<NamedOptimizer>& optimizers,
                                        const std::vector<double>& norm_grid, std::size_t threads) {
  if (norm_grid.empty()) throw ContractError("norm grid is empty");
  for (std::size_t i = 0; i < norm_grid.size(); ++i) {
    if (!std::isfinite(norm_grid[i]) || norm_grid[i] < 0) throw ContractError("norm grid values must be finite and >= 0");
    if (i > 0 && !(norm_grid[i] > norm_grid[i - 1])) throw ContractError("norm grid must be ascending");
  }
  const std::size_t per = norm_grid.size();
  std::vector<SweepRow> rows(samples.size() * optimizers.size() * per);
  parallel_for(
      samples.size() * optimizers.size(),
      [&](std::size_t task) {
        const std::size_t si = task / optimizers.size();
        const std::size_t oi = task % optimizers.size();
        const auto& s = samples[si];
        const std::vector<T> eta = token_learning_rates(s.batch, s.layer);
        const double before = static_cast<double>(reconstruction_loss<T>(s.batch, eta, s.layer, s.weights));
        const auto delta = compute_update<T>(s.batch.tokens, s.batch.tokens, eta, s.weights, s.layer,
                                             optimizers[oi].spec);
        const double n = update_norm(delta);
        for (std::size_t g = 0; g < per; ++g) {
          SweepRow& row = rows[task * per + g];
          row.sample = si;
          row.optimizer = optimizers[oi].label;
          row.norm = norm_grid[g];
          row.loss_before = before;
          row.natural_norm = n;
          if (n > 0 && norm_grid[g] > 0) {
            const auto w = apply_update(s.weights, delta, static_cast<T>(norm_grid[g] / n));
            row.loss = static_cast<double>(reconstruction_loss<T>(s.batch, eta, s.layer, w));
          } else {
            row.loss = before;
          }
        }
      },
      threads);
  return rows;
}

std::vector<double> min_loss_per_sample(const std::vector<SweepRow>& rows, std::string_view optimizer) {
  std::vector<double> out;
  for (const auto& r : rows) {
    if (r.optimizer != optimizer) continue;
    if (out.size() <= r.sample) out.resize(r.sample + 1, std::numeric_limits<double>::infinity());
    out[r.sample] = std::min(out[r.sample], r.loss);
  }
  return out;
}

std::string sweep_to_csv(const std::vector<SweepRow>& rows) {
  std::string out = "sample,optimizer,norm,loss,loss_before,natural_norm\n";
  for (const auto& r : rows) {
    out += std::to_string(r.sample) + "," + r.optimizer + "," + format_double(r.norm) + "," +
           format_double(r.loss) + "," + format_double(r.loss_before) + "," + format_double(r.natural_norm) + "\n";
  }
  return out;
}

template <typename T>
std::vector<TokenBatch<T>> batches_from_stream(const Stream& stream, std::size_t batch_size) {
  if (batch_size == 0) throw ContractError("batch size must be positive");
  std::vector<TokenBatch<T>> out;
  std::vector<T> rows;
  std::size_t count = 0;
  auto emit = [&] {
    out.push_back(TokenBatch<T>::visual(Matrix<T>::from_data(count, stream.dim, std::move(rows)), out.size()));
    rows = {};
    count = 0;
  };
  for (const auto& f : stream.frames) {
    for (std::size_t r = 0; r < f.visual.rows(); ++r) {
      for (float v : f.visual.row(r)) rows.push_back(static_cast<T>(v));
      if (++count == batch_size) emit();
    }
  }
  if (count > 0) emit();
  return out;
}

template <typename T>
std::vector<StatsRow> ttt_statistics(const std::vector<TokenBatch<T>>& batches, const TttLayerParams<T>& layer,
                                     const FastWeights<T>& w0, const std::vector<NamedOptimizer>& optimizers,
                                     double matched_norm, std::size_t threads) {
  if (!(matched_norm > 0) || !std::isfinite(matched_norm)) throw ContractError("matched norm must be > 0");
  std::vector<StatsRow> rows(batches.size() * optimizers.size());
  parallel_for(
      optimizers.size(),
      [&](std::size_t oi) {
        FastWeights<T> w = w0;
        for (std::size_t t = 0; t < batches.size(); ++t) {
          StepResult<T> r = ttt_step(batches[t], w, layer, optimizers[oi].spec, StepOptions{matched_norm});
          StatsRow& row = rows[oi * batches.size() + t];
          row.step = t;
          row.optimizer = optimizers[oi].label;
          row.loss_before = r.metrics.loss_before;
          row.loss_after = r.metrics.loss_after;
          row.relative_output_change = r.metrics.relative_output_change;
          row.update_norm = r.metrics.update_norm;
          w = std::move(r.weights);
        }
      },
      threads);
  return rows;
}

std::vector<double> mean_relative_change(const std::vector<StatsRow>& rows,
                                         const std::vector<NamedOptimizer>& optimizers) {
  std::vector<double> out;
  for (const auto& o : optimizers) {
    double acc = 0;
    std::size_t n = 0;
    for (const auto& r : rows) {
      if (r.optimizer == o.label) {
        acc += r.relative_output_change;
        ++n;
      }
    }
    out.push_back(n > 0 ? acc / static_cast<double>(n) : 0.0);
  }
  return out;
}

std::string stats_to_csv(const std::vector<StatsRow>& rows) {
  std::string out = "step,optimizer,loss_before,loss_after,relative_output_change,update_norm\n";
  for (const auto& r : rows) {
    out += std::to_string(r.step) + "," + r.optimizer + "," + format_double(r.loss_before) + "," +
           format_double(r.loss_after) + "," + format_double(r.relative_output_change) + "," +
           format_double(r.update_norm) + "\n";
  }
  return out;
}

// ---------------------------------------------------------------------------

template <typename T>
PairSet<T> pairs_from_stream(const Stream& stream) {
  PairSet<T> p{Matrix<T>(0, stream.dim), Matrix<T>(0, stream.dim)};
  for (const auto& f : stream.frames) {
    if (f.visual.rows() != 2) throw ContractError("associative-pairs frame must hold exactly 2 visual rows");
    std::vector<T> k(f.visual.row(0).begin(), f.visual.row(0).end());
    std::vector<T> v(f.visual.row(1).begin(), f.visual.row(1).end());
    p.keys.append_row(k);
    p.values.append_row(v);
  }
  return p;
}

json RecallReport::to_json() const {
  ordered_json j;
  j["optimizer"] = optimizer;
  j["seed"] = seed;
  j["warmup_steps"] = warmup_steps;
  j["probes"] = rows.size();
  j["mean_updated_error"] = mean_updated_error;
  j["mean_frozen_error"] = mean_frozen_error;
  j["fraction_improved"] = fraction_improved;
  j["most_recent_error"] = most_recent_error;
  j["rows"] = json::array();
  for (const auto& r : rows) {
    ordered_json row;
    row["pair"] = r.pair;
    row["updated_error"] = r.updated_error;
    row["frozen_error"] = r.frozen_error;
    j["rows"].push_back(row);
  }
  return json(j);
}

template <typename T>
RecallReport recall_eval(const StreamConfig& cfg, const PairSet<T>& pairs, const NamedOptimizer& optimizer,
                         const RecallOptions& options) {
  RecallReport report;
  report.optimizer = optimizer.label;
  report.seed = cfg.seed;
  report.warmup_steps = options.warmup_steps;
  const std::size_t n = pairs.keys.rows();
  if (pairs.values.rows() != n) throw DimensionError("recall: key and value counts differ");
  if (n == 0) return report;
  if (pairs.keys.cols() != cfg.dim) throw DimensionError("recall: pair width differs from config dim");

  const TttLayerParams<T> layer = make_layer<T>(cfg);
  FastWeights<T> w0 = make_initial_weights(cfg, layer);
  std::mt19937_64 rng(derive_seed(cfg.seed, kWarmup));
  for (std::size_t t = 0; t < options.warmup_steps; ++t) {
    const auto batch = TokenBatch<T>::visual(random_tokens<T>(options.warmup_batch, cfg.dim, cfg.token_std, rng), t);
    w0 = ttt_step(batch, w0, layer, OptimizerSpec::sgd()).weights;
  }
  FastWeights<T> w = w0;
  for (std::size_t start = 0, step = 0; start < n; start += cfg.batch_size, ++step) {
    const std::size_t m = std::min(cfg.batch_size, n - start);
    const auto keys = TokenBatch<T>::visual(row_block(pairs.keys, start, m), step);
    w = ttt_step_paired(keys, row_block(pairs.values, start, m), w, layer, optimizer.spec).weights;
  }

  const Matrix<T> updated = ttt_apply(pairs.keys, layer.theta_k, layer, w);
  const Matrix<T> frozen = ttt_apply(pairs.keys, layer.theta_k, layer, w0);
  const Matrix<T> target = matmul_transposed(pairs.values, layer.theta_v);
  auto error = [&](const Matrix<T>& out, std::size_t i) {
    double num = 0, den = 0;
    for (std::size_t k = 0; k < target.cols(); ++k) {
      const double e = static_cast<double>(out(i, k)) - target(i, k);
      num += e * e;
      den += static_cast<double>(target(i, k)) * target(i, k);
    }
    return den > 0 ? std::sqrt(num / den) : std::sqrt(num);
  };
  const std::size_t probes = options.probe_count == 0 ? n : std::min(options.probe_count, n);
  std::size_t improved = 0;
  for (std::size_t i = 0; i < probes; ++i) {
    RecallRow r{i, error(updated, i), error(frozen, i)};
    report.mean_updated_error += r.updated_error;
    report.mean_frozen_error += r.frozen_error;
    improved += r.updated_error < r.frozen_error ? 1 : 0;
    report.rows.push_back(r);
  }
  report.mean_updated_error /= static_cast<double>(probes);
  report.mean_frozen_error /= static_cast<double>(probes);
  report.fraction_improved = static_cast<double>(improved) / static_cast<double>(probes);
  report.most_recent_error = error(updated, n - 1);
  return report;
}

// ---------------------------------------------------------------------------

json ReaderReport::to_json() const {
  ordered_json j;
  j["memory_rows"] = memory_rows;
  j["rows"] = json::array();
  for (const auto& r : rows) {
    ordered_json row;
    row["avg_tokens"] = r.avg_tokens;
    row["ratio"] = r.ratio;
    row["retained"] = r.retained;
    row["max_abs_diff"] = r.max_abs_diff;
    row["divergence"] = r.divergence;
    row["tokens_match"] = r.tokens_match;
    j["rows"].push_back(row);
  }
  return json(j);
}

ReaderReport reader_eval(const Matrix<double>& memory, const ToyStackConfig& stack_config, std::size_t chunk,
                         const PromptSpec& prompt_spec, const std::vector<std::size_t>& budgets) {
  if (memory.rows() == 0) throw ContractError("reader_eval: memory snapshot is empty");
  if (prompt_spec.length == 0) throw ContractError("reader_eval: prompt must not be empty");
  ToyStackConfig sc = stack_config;
  sc.dim = memory.cols();
  const ToyStackParams stack = ToyStackParams::make(sc);

  std::mt19937_64 rng(derive_seed(prompt_spec.seed, kPrompt));
  std::uniform_int_distribution<std::uint32_t> pick(0, static_cast<std::uint32_t>(sc.vocab - 1));
  std::vector<std::uint32_t> ids(prompt_spec.length);
  for (auto& id : ids) id = pick(rng);
  const Matrix<double> prompt = stack.embed(ids);
  const auto steps = static_cast<std::int64_t>(prompt_spec.decode_steps);
  const DecodeResult full = decode_with_kv(full_kv_cache(memory, stack), prompt, stack, steps);

  ReaderReport report;
  report.memory_rows = memory.rows();
  for (std::size_t m : budgets) {
    const ReaderBudget budget{std::min(chunk, memory.rows()), m, memory.rows()};
    budget.validate(sc.layers);
    const CompressResult c = compress_kv(memory, prompt, stack, budget);
    const DecodeResult dec = decode_with_kv(c.kv, prompt, stack, steps);
    ReaderRow row;
    row.avg_tokens = m;
    row.ratio = static_cast<double>(m) / static_cast<double>(memory.rows());
    row.retained = c.kv.total();
    double sq = 0;
    for (std::size_t k = 0; k < full.logits[0].size(); ++k) {
      const double e = dec.logits[0][k] - full.logits[0][k];
      row.max_abs_diff = std::max(row.max_abs_diff, std::abs(e));
      sq += e * e;
    }
    row.divergence = std::sqrt(sq);
    row.tokens_match = dec.tokens == full.tokens;
    if (m == memory.rows() && !(row.max_abs_diff <= 1e-6)) {
      throw NumericError("reader_eval: M = N decoding differs from the full cache by " +
                         format_double(row.max_abs_diff));
    }
    report.rows.push_back(row);
  }
  return report;
}

// ---------------------------------------------------------------------------

#define FASTMEM_INSTANTIATE(T)                                                                           \
  template Matrix<T> random_tokens(std::size_t, std::size_t, double, std::mt19937_64&);                 \
  template TttLayerParams<T> make_layer(const StreamConfig&);                                           \
  template FastWeights<T> make_initial_weights(const StreamConfig&, const TttLayerParams<T>&);          \
  template RunResult<T> run_stream(const StreamConfig&, FrameSource&, const RunOptions&,                \
                                   const StepObserver<T>&);                                             \
  template std::vector<BatchSample<T>> sweep_samples(const StreamConfig&, std::size_t, std::size_t);    \
  template std::vector<SweepRow> sweep_update_norm(const std::vector<BatchSample<T>>&,                  \
                                                   const std::vector<NamedOptimizer>&,                  \
                                                   const std::vector<double>&, std::size_t);            \
  template std::vector<TokenBatch<T>> batches_from_stream(const Stream&, std::size_t);                  \
  template std::vector<StatsRow> ttt_statistics(const std::vector<TokenBatch<T>>&,                      \
                                                const TttLayerParams<T>&, const FastWeights<T>&,        \
                                                const std::vector<NamedOptimizer>&, double, std::size_t); \
  template PairSet<T> pairs_from_stream(const Stream&);                                                 \
  template RecallReport recall_eval(const StreamConfig&, const PairSet<T>&, const NamedOptimizer&,      \
                                    const RecallOptions&);

FASTMEM_INSTANTIATE(float)
FASTMEM_INSTANTIATE(double)

#undef FASTMEM_INSTANTIATE

}  // namespace fastmem
