// SPDX-License-Identifier: Apache-2.0

#include "fastmem/memory.hpp"

#include <algorithm>
#include <limits>
#include <numeric>

#include "fastmem/binary_io.hpp"

namespace fastmem {

namespace {

template <typename T>
void append_rows(MemoryState<T>& mem, const Matrix<T>& incoming,
                 std::span<const Provenance> provenance) {
  if (incoming.rows() != provenance.size()) {
    throw DimensionError("one provenance record per incoming row required");
  }
  if (incoming.rows() == 0) return;
  if (incoming.cols() != mem.dim()) throw DimensionError("incoming token width mismatch");
  for (std::size_t r = 0; r < incoming.rows(); ++r) mem.tokens.append_row(incoming.row(r));
  mem.provenance.insert(mem.provenance.end(), provenance.begin(), provenance.end());
}

}  // namespace

template <typename T>
MemoryState<T> MemoryState<T>::empty(std::size_t budget, std::size_t dim) {
  if (budget == 0) throw ContractError("memory budget must be positive");
  MemoryState m;
  m.tokens = Matrix<T>(0, dim);
  m.budget = budget;
  return m;
}

template <typename T>
std::size_t MemoryState<T>::footprint_bytes() const noexcept {
  return tokens.storage().capacity() * sizeof(T) + provenance.capacity() * sizeof(Provenance);
}

template <typename T>
std::vector<double> successor_similarities(const Matrix<T>& tokens) {
  const std::size_t n = tokens.rows();
  std::vector<double> s(n, -std::numeric_limits<double>::infinity());
  for (std::size_t i = 0; i + 1 < n; ++i) {
    s[i] = static_cast<double>(cosine_similarity<T>(tokens.row(i), tokens.row(i + 1)));
  }
  return s;
}

std::vector<std::size_t> select_discards(std::span<const double> similarities, std::size_t count) {
  count = std::min(count, similarities.size());
  std::vector<std::size_t> idx(similarities.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  auto more_similar = [&](std::size_t a, std::size_t b) {
    if (similarities[a] != similarities[b]) return similarities[a] > similarities[b];
    return a < b;
  };
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(count), idx.end(),
                    more_similar);
  idx.resize(count);
  std::sort(idx.begin(), idx.end());
  return idx;
}

template <typename T>
void append_and_discard(MemoryState<T>& mem, const Matrix<T>& incoming,
                        std::span<const Provenance> provenance) {
  append_rows(mem, incoming, provenance);
  if (mem.size() <= mem.budget) return;
  const std::vector<double> sims = successor_similarities(mem.tokens);
  const auto drop = select_discards(sims, mem.size() - mem.budget);
  std::vector<bool> keep(mem.size(), true);
  for (std::size_t i : drop) keep[i] = false;
  mem.tokens.retain_rows(keep);
  std::size_t out = 0;
  for (std::size_t i = 0; i < keep.size(); ++i) {
    if (keep[i]) mem.provenance[out++] = mem.provenance[i];
  }
  mem.provenance.resize(out);
}

template <typename T>
void append_and_merge(MemoryState<T>& mem, const Matrix<T>& incoming,
                      std::span<const Provenance> provenance) {
  append_rows(mem, incoming, provenance);
  if (mem.size() <= mem.budget) return;

  const std::size_t d = mem.dim();
  std::vector<std::vector<T>> rows;
  rows.reserve(mem.size());
  for (std::size_t i = 0; i < mem.size(); ++i) {
    rows.emplace_back(mem.tokens.row(i).begin(), mem.tokens.row(i).end());
  }
  std::vector<double> sims(rows.size() - 1);
  for (std::size_t i = 0; i + 1 < rows.size(); ++i) {
    sims[i] = static_cast<double>(cosine_similarity<T>(rows[i], rows[i + 1]));
  }
  while (rows.size() > mem.budget) {
    const auto best = static_cast<std::size_t>(
        std::distance(sims.begin(), std::max_element(sims.begin(), sims.end())));
    for (std::size_t k = 0; k < d; ++k) rows[best][k] = (rows[best][k] + rows[best + 1][k]) / T(2);
    rows.erase(rows.begin() + static_cast<std::ptrdiff_t>(best) + 1);
    mem.provenance.erase(mem.provenance.begin() + static_cast<std::ptrdiff_t>(best) + 1);
    sims.erase(sims.begin() + static_cast<std::ptrdiff_t>(best));
    if (best > 0) {
      sims[best - 1] = static_cast<double>(cosine_similarity<T>(rows[best - 1], rows[best]));
    }
    if (best + 1 < rows.size()) {
      sims[best] = static_cast<double>(cosine_similarity<T>(rows[best], rows[best + 1]));
    }
  }
  Matrix<T> merged(0, d);
  merged.reserve_rows(mem.tokens.capacity_rows());
  for (const auto& r : rows) merged.append_row(r);
  mem.tokens = std::move(merged);
}

template <typename T>
void append_audio(MemoryState<T>& mem, const Matrix<T>& audio_tokens, std::uint64_t stream_index) {
  const std::vector<Provenance> prov(audio_tokens.rows(), Provenance{stream_index, Modality::audio});
  append_and_discard(mem, audio_tokens, prov);
}

template <typename T>
std::vector<std::uint8_t> encode_snapshot(const MemoryState<T>& mem) {
  if (mem.provenance.size() != mem.size()) throw ContractError("snapshot: provenance length");
  ByteWriter w;
  w.magic("VSMS");
  w.u32(1);
  w.u32(static_cast<std::uint32_t>(mem.budget));
  w.u32(static_cast<std::uint32_t>(mem.dim()));
  w.u32(static_cast<std::uint32_t>(mem.size()));
  for (T v : mem.tokens.values()) w.f32(static_cast<float>(v));
  for (const auto& p : mem.provenance) {
    w.u64(p.stream_index);
    w.u8(static_cast<std::uint8_t>(p.modality));
  }
  return w.take();
}

MemoryState<float> decode_snapshot(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  r.expect_magic("VSMS");
  const auto version_at = r.offset();
  if (r.u32() != 1) throw ParseError("unsupported snapshot version", version_at);
  const std::uint32_t budget = r.u32();
  const std::uint32_t d = r.u32();
  const auto rows_at = r.offset();
  const std::uint32_t rows = r.u32();
  if (budget == 0) throw ParseError("snapshot budget is zero", rows_at - 8);
  if (rows > budget) throw ParseError("snapshot holds more rows than its budget", rows_at);
  const std::uint64_t values = std::uint64_t{rows} * d;
  r.require(values * 4 + std::uint64_t{rows} * 9, "snapshot payload");

  std::vector<float> data(values);
  for (float& v : data) v = r.f32();
  MemoryState<float> mem;
  mem.budget = budget;
  mem.tokens = Matrix<float>::from_data(rows, d, std::move(data), false);
  mem.provenance.resize(rows);
  for (auto& p : mem.provenance) {
    p.stream_index = r.u64();
    const auto at = r.offset();
    const std::uint8_t m = r.u8();
    if (m > 1) throw ParseError("unknown modality tag " + std::to_string(m), at);
    p.modality = static_cast<Modality>(m);
  }
  r.expect_end();
  return mem;
}

template <typename T>
void write_snapshot(const std::filesystem::path& path, const MemoryState<T>& mem) {
  write_file_atomic(path, encode_snapshot(mem));
}

MemoryState<float> read_snapshot(const std::filesystem::path& path) {
  return decode_snapshot(read_file_bytes(path));
}

#define FASTMEM_INSTANTIATE(T)                                                                  \
  template struct MemoryState<T>;                                                               \
  template std::vector<double> successor_similarities(const Matrix<T>&);                        \
  template void append_and_discard(MemoryState<T>&, const Matrix<T>&,                           \
                                   std::span<const Provenance>);                                \
  template void append_and_merge(MemoryState<T>&, const Matrix<T>&, std::span<const Provenance>); \
  template void append_audio(MemoryState<T>&, const Matrix<T>&, std::uint64_t);                 \
  template std::vector<std::uint8_t> encode_snapshot(const MemoryState<T>&);                    \
  template void write_snapshot(const std::filesystem::path&, const MemoryState<T>&);

FASTMEM_INSTANTIATE(float)
FASTMEM_INSTANTIATE(double)

#undef FASTMEM_INSTANTIATE

}  // namespace fastmem
