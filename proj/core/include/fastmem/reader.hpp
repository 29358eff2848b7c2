// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "fastmem/matrix.hpp"
#include "fastmem/mlp.hpp"

namespace fastmem {

struct ToyStackConfig {
  std::size_t layers = 4;
  std::size_t heads = 4;
  std::size_t dim = 64;
  std::size_t ffn_hidden = 128;
  std::size_t vocab = 96;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Pre-norm transformer block: x += Attn(LN₁ x); x += FFN(LN₂ x).
struct ToyLayer {
  Matrix<double> wq, wk, wv, wo;  ///< d x d, applied as x·W
  LayerNormParams<double> ln_attn, ln_ffn;
  Matrix<double> ff_in;  ///< d x ffn_hidden
  std::vector<double> ff_in_bias;
  Matrix<double> ff_out;  ///< ffn_hidden x d
  std::vector<double> ff_out_bias;
};

/// Deterministic randomly initialised causal attention stack standing in for
/// the language model.
struct ToyStackParams {
  ToyStackConfig config;
  std::vector<ToyLayer> layers;
  Matrix<double> embedding;  ///< vocab x d
  LayerNormParams<double> final_ln;
  Matrix<double> unembed;  ///< d x vocab

  static ToyStackParams make(const ToyStackConfig& config);

  std::size_t dim() const noexcept { return config.dim; }
  std::size_t head_dim() const noexcept { return config.dim / config.heads; }
  Matrix<double> embed(std::span<const std::uint32_t> ids) const;
};

struct KvEntry {
  std::vector<double> key;
  std::vector<double> value;
  std::uint64_t position = 0;

  friend bool operator==(const KvEntry&, const KvEntry&) = default;
};

/// Retained key/value pairs per layer; positions strictly increase within a layer.
struct KvStore {
  std::vector<std::vector<KvEntry>> layers;

  static KvStore empty(std::size_t layer_count) { return {std::vector<std::vector<KvEntry>>(layer_count)}; }
  std::size_t total() const noexcept;
  std::vector<std::size_t> retained_per_layer() const;
  /// Throws ContractError if positions are not strictly increasing.
  void check_ordering() const;

  friend bool operator==(const KvStore&, const KvStore&) = default;
};

/// One JSON object per line: {"layer", "position", "key", "value"}.
std::string kv_store_to_jsonl(const KvStore& kv);

/// Post-softmax attention from every prompt token to every chunk position,
/// indexed [head][prompt][chunk].
struct AttentionScores {
  std::size_t heads = 0;
  std::size_t prompt_len = 0;
  std::size_t chunk_len = 0;
  std::vector<double> data;

  double& at(std::size_t h, std::size_t s, std::size_t j) {
    return data[(h * prompt_len + s) * chunk_len + j];
  }
  double at(std::size_t h, std::size_t s, std::size_t j) const {
    return data[(h * prompt_len + s) * chunk_len + j];
  }
};

struct ChunkForward {
  Matrix<double> outputs;  ///< (chunk + prompt) x d, final hidden states
  KvStore fresh;           ///< the chunk's own KV per layer (prompt KV is not kept)
  std::vector<AttentionScores> scores;  ///< per layer
  /// Σ of attention probabilities per [layer][head][query], queries ordered
  /// chunk then prompt.
  std::vector<std::vector<std::vector<double>>> row_sums;
};

/// Attention over Concat(chunk; prompt) conditioned on the retained cache.
/// Chunk tokens are placed at `first_position`, `first_position + 1`, ...
ChunkForward attn_forward_chunk(const Matrix<double>& chunk, std::uint64_t first_position,
                                const Matrix<double>& prompt, const KvStore& kv,
                                const ToyStackParams& stack);

/// a_j = Σ_s (1/H) Σ_h A[h, s, j].
std::vector<double> prompt_importance(const AttentionScores& scores);

/// ArgTopK over the concatenation of all layers' importance; ties go to the
/// lower layer, then the lower position. Per-layer index lists are ascending.
std::vector<std::vector<std::size_t>> select_topk_global(
    const std::vector<std::vector<double>>& importance, std::int64_t k);

struct ReaderBudget {
  std::size_t chunk = 64;        ///< m
  std::size_t avg_tokens = 64;   ///< M, average retained per layer
  std::size_t memory_len = 256;  ///< N

  void validate(std::size_t layers) const;
  /// K' = ⌊m·L·M/N⌋, at least 1.
  std::size_t keep_per_chunk(std::size_t layers) const;
  std::size_t chunk_count() const noexcept { return (memory_len + chunk - 1) / chunk; }
};

struct CompressResult {
  KvStore kv;
  std::vector<std::size_t> kept_per_chunk;
};

/// Chunked prompt-dependent compression of the memory into a KV cache.
CompressResult compress_kv(const Matrix<double>& memory, const Matrix<double>& prompt,
                           const ToyStackParams& stack, const ReaderBudget& budget);

/// Uncompressed cache from a single causal pass over the memory.
KvStore full_kv_cache(const Matrix<double>& memory, const ToyStackParams& stack);

struct DecodeResult {
  std::vector<std::uint32_t> tokens;
  std::vector<std::vector<double>> logits;  ///< one row per emitted token
};

/// Greedy argmax decoding: the prompt attends to `kv`, then each emitted token
/// is fed back. Deterministic.
DecodeResult decode_with_kv(const KvStore& kv, const Matrix<double>& prompt,
                            const ToyStackParams& stack, std::int64_t max_steps);

}  // namespace fastmem
