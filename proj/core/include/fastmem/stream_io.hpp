// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fastmem/binary_io.hpp"
#include "fastmem/matrix.hpp"

namespace fastmem {

/// One frame of a VSTR stream. Both matrices have the stream's width.
struct StreamFrame {
  Matrix<float> visual;
  Matrix<float> audio;

  friend bool operator==(const StreamFrame&, const StreamFrame&) = default;
};

struct Stream {
  std::uint32_t dim = 0;
  std::vector<StreamFrame> frames;

  friend bool operator==(const Stream&, const Stream&) = default;
};

/// "VSTR", u32 version = 1, u32 d, u32 frame_count, then per frame
/// u32 n_visual, u32 n_audio and the rows (visual first) as little-endian f32.
std::vector<std::uint8_t> encode_stream(const Stream& stream);
Stream decode_stream(std::span<const std::uint8_t> bytes);

void write_stream(const std::filesystem::path& path, const Stream& stream);
Stream read_stream(const std::filesystem::path& path);

/// Incremental VSTR writer. The frame count in the header is patched on
/// finish(); the file appears at `path` only after finish().
class StreamWriter {
 public:
  StreamWriter(const std::filesystem::path& path, std::uint32_t dim);
  ~StreamWriter();
  StreamWriter(const StreamWriter&) = delete;
  StreamWriter& operator=(const StreamWriter&) = delete;

  void write(const StreamFrame& frame);
  void finish();
  std::uint32_t frames_written() const noexcept { return frames_; }

 private:
  std::filesystem::path path_, tmp_;
  std::ofstream out_;
  std::uint32_t dim_;
  std::uint32_t frames_ = 0;
  bool finished_ = false;
};

/// Reads one frame at a time, so resident memory does not grow with the
/// stream. Parse errors carry absolute file offsets.
class StreamReader {
 public:
  explicit StreamReader(const std::filesystem::path& path);

  std::uint32_t dim() const noexcept { return dim_; }
  std::uint32_t frame_count() const noexcept { return count_; }
  std::uint64_t offset() const noexcept { return offset_; }

  /// Next frame, or nullopt after the last one. Trailing bytes are an error.
  std::optional<StreamFrame> next();

 private:
  void read_exact(void* dst, std::size_t n, const char* what);
  std::uint32_t read_u32(const char* what);

  std::ifstream in_;
  std::uint64_t size_ = 0;
  std::uint64_t offset_ = 0;
  std::uint32_t dim_ = 0;
  std::uint32_t count_ = 0;
  std::uint32_t read_ = 0;
  std::vector<std::uint8_t> scratch_;
};

/// Sidecar metadata written next to a stream as `<stream>.json`.
std::filesystem::path metadata_path(const std::filesystem::path& stream_path);
void write_metadata(const std::filesystem::path& stream_path, const nlohmann::json& meta);
nlohmann::json read_metadata(const std::filesystem::path& stream_path);

}  // namespace fastmem
