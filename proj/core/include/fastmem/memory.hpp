// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "fastmem/matrix.hpp"
#include "fastmem/ttt.hpp"

namespace fastmem {

struct Provenance {
  std::uint64_t stream_index = 0;
  Modality modality = Modality::visual;

  friend bool operator==(const Provenance&, const Provenance&) = default;
};

/// Fixed-budget token memory Z̃_t.
template <typename T>
struct MemoryState {
  Matrix<T> tokens;  ///< rows <= budget after every maintenance call
  std::size_t budget = 0;
  std::vector<Provenance> provenance;

  static MemoryState empty(std::size_t budget, std::size_t dim);

  std::size_t size() const noexcept { return tokens.rows(); }
  std::size_t dim() const noexcept { return tokens.cols(); }
  std::size_t footprint_bytes() const noexcept;

  friend bool operator==(const MemoryState&, const MemoryState&) = default;
};

/// s_n = cos(z_n, z_{n+1}); the last entry is −∞.
template <typename T>
std::vector<double> successor_similarities(const Matrix<T>& tokens);

/// Indices dropped from a sequence of `similarities`: the `count` largest,
/// ties going to the lower index. Returned ascending.
std::vector<std::size_t> select_discards(std::span<const double> similarities, std::size_t count);

/// Concatenates `incoming` and drops the rows most similar to their successor
/// until at most `budget` rows remain. Surviving rows keep stream order.
template <typename T>
void append_and_discard(MemoryState<T>& mem, const Matrix<T>& incoming,
                        std::span<const Provenance> provenance);

/// Baseline: repeatedly averages the most similar adjacent pair until the
/// budget holds. The merged row keeps the earlier token's provenance.
template <typename T>
void append_and_merge(MemoryState<T>& mem, const Matrix<T>& incoming,
                      std::span<const Provenance> provenance);

/// Audio rows skip the TTT layer and are appended after the frame's visual
/// memory tokens; budget maintenance then runs as for any token.
template <typename T>
void append_audio(MemoryState<T>& mem, const Matrix<T>& audio_tokens, std::uint64_t stream_index);

/// Binary snapshot: "VSMS", u32 version = 1, u32 N, u32 d, u32 rows,
/// rows·d little-endian f32, then per row (u64 stream index, u8 modality).
template <typename T>
std::vector<std::uint8_t> encode_snapshot(const MemoryState<T>& mem);

MemoryState<float> decode_snapshot(std::span<const std::uint8_t> bytes);

template <typename T>
void write_snapshot(const std::filesystem::path& path, const MemoryState<T>& mem);

MemoryState<float> read_snapshot(const std::filesystem::path& path);

}  // namespace fastmem
