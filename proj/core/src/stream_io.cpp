// SPDX-License-Identifier: Apache-2.0

#include "fastmem/stream_io.hpp"

#include <bit>
#include <fstream>
#include <iterator>
#include <system_error>

#include "fastmem/error.hpp"

namespace fastmem {

namespace fs = std::filesystem;

namespace {

constexpr std::uint32_t kStreamVersion = 1;
constexpr std::size_t kHeaderBytes = 16;

void put_rows(ByteWriter& w, const Matrix<float>& m) {
  for (float v : m.values()) w.f32(v);
}

Matrix<float> get_rows(ByteReader& r, std::uint32_t rows, std::uint32_t d) {
  const std::uint64_t n = std::uint64_t{rows} * d;
  r.require(n * 4, "frame rows");
  std::vector<float> data(n);
  for (auto& v : data) v = r.f32();
  return Matrix<float>::from_data(rows, d, std::move(data), false);
}

fs::path temp_sibling(const fs::path& path) {
  fs::path tmp = path;
  tmp += ".tmp";
  return tmp;
}

}  // namespace

std::vector<std::uint8_t> read_file_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file_atomic(const fs::path& path, std::span<const std::uint8_t> bytes) {
  const fs::path tmp = temp_sibling(path);
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("write failed: " + tmp.string());
  }
  fs::rename(tmp, path);
}

void write_file_atomic(const fs::path& path, std::string_view text) {
  write_file_atomic(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

std::vector<std::uint8_t> encode_stream(const Stream& stream) {
  ByteWriter w;
  w.magic("VSTR");
  w.u32(kStreamVersion);
  w.u32(stream.dim);
  w.u32(static_cast<std::uint32_t>(stream.frames.size()));
  for (const auto& f : stream.frames) {
    if ((f.visual.rows() > 0 && f.visual.cols() != stream.dim) ||
        (f.audio.rows() > 0 && f.audio.cols() != stream.dim)) {
      throw DimensionError("encode_stream: frame width differs from stream dim");
    }
    w.u32(static_cast<std::uint32_t>(f.visual.rows()));
    w.u32(static_cast<std::uint32_t>(f.audio.rows()));
    put_rows(w, f.visual);
    put_rows(w, f.audio);
  }
  return w.take();
}

Stream decode_stream(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  r.expect_magic("VSTR");
  const std::uint64_t at = r.offset();
  if (const auto v = r.u32(); v != kStreamVersion) {
    throw ParseError("unsupported stream version " + std::to_string(v), at);
  }
  Stream s;
  s.dim = r.u32();
  const std::uint32_t frames = r.u32();
  if (s.dim == 0 && frames > 0) throw ParseError("stream dim is zero", 8);
  r.require(std::uint64_t{frames} * 8, "frame headers");
  s.frames.reserve(frames);
  for (std::uint32_t i = 0; i < frames; ++i) {
    const std::uint32_t nv = r.u32();
    const std::uint32_t na = r.u32();
    StreamFrame f;
    f.visual = get_rows(r, nv, s.dim);
    f.audio = get_rows(r, na, s.dim);
    s.frames.push_back(std::move(f));
  }
  r.expect_end();
  return s;
}

void write_stream(const fs::path& path, const Stream& stream) {
  write_file_atomic(path, encode_stream(stream));
}

Stream read_stream(const fs::path& path) { return decode_stream(read_file_bytes(path)); }

StreamWriter::StreamWriter(const fs::path& path, std::uint32_t dim)
    : path_(path), tmp_(temp_sibling(path)), dim_(dim) {
  out_.open(tmp_, std::ios::binary | std::ios::trunc);
  if (!out_) throw std::runtime_error("cannot write " + tmp_.string());
  ByteWriter w;
  w.magic("VSTR");
  w.u32(kStreamVersion);
  w.u32(dim_);
  w.u32(0);
  out_.write(reinterpret_cast<const char*>(w.bytes().data()), static_cast<std::streamsize>(w.bytes().size()));
}

StreamWriter::~StreamWriter() {
  if (!finished_) {
    out_.close();
    std::error_code ec;
    fs::remove(tmp_, ec);
  }
}

void StreamWriter::write(const StreamFrame& frame) {
  if (finished_) throw ContractError("StreamWriter: write after finish");
  if ((frame.visual.rows() > 0 && frame.visual.cols() != dim_) ||
      (frame.audio.rows() > 0 && frame.audio.cols() != dim_)) {
    throw DimensionError("StreamWriter: frame width differs from stream dim");
  }
  ByteWriter w;
  w.u32(static_cast<std::uint32_t>(frame.visual.rows()));
  w.u32(static_cast<std::uint32_t>(frame.audio.rows()));
  put_rows(w, frame.visual);
  put_rows(w, frame.audio);
  out_.write(reinterpret_cast<const char*>(w.bytes().data()), static_cast<std::streamsize>(w.bytes().size()));
  ++frames_;
}

void StreamWriter::finish() {
  if (finished_) return;
  ByteWriter w;
  w.u32(frames_);
  out_.seekp(12);
  out_.write(reinterpret_cast<const char*>(w.bytes().data()), 4);
  out_.close();
  if (!out_) throw std::runtime_error("write failed: " + tmp_.string());
  fs::rename(tmp_, path_);
  finished_ = true;
}

StreamReader::StreamReader(const fs::path& path) : in_(path, std::ios::binary) {
  if (!in_) throw std::runtime_error("cannot open " + path.string());
  size_ = fs::file_size(path);
  char magic[4];
  read_exact(magic, 4, "magic");
  if (std::string_view(magic, 4) != "VSTR") throw ParseError("bad magic, expected \"VSTR\"", 0);
  const std::uint64_t at = offset_;
  if (const auto v = read_u32("version"); v != kStreamVersion) {
    throw ParseError("unsupported stream version " + std::to_string(v), at);
  }
  dim_ = read_u32("dim");
  count_ = read_u32("frame count");
  if (dim_ == 0 && count_ > 0) throw ParseError("stream dim is zero", 8);
  static_assert(kHeaderBytes == 16);
}

void StreamReader::read_exact(void* dst, std::size_t n, const char* what) {
  if (offset_ + n > size_) {
    throw ParseError(std::string("truncated ") + what + ": need " + std::to_string(n) +
                         " bytes, have " + std::to_string(size_ - offset_),
                     offset_);
  }
  in_.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
  if (!in_) throw ParseError(std::string("read failed: ") + what, offset_);
  offset_ += n;
}

std::uint32_t StreamReader::read_u32(const char* what) {
  std::uint8_t b[4];
  read_exact(b, 4, what);
  return std::uint32_t{b[0]} | (std::uint32_t{b[1]} << 8) | (std::uint32_t{b[2]} << 16) |
         (std::uint32_t{b[3]} << 24);
}

std::optional<StreamFrame> StreamReader::next() {
  if (read_ == count_) {
    if (offset_ != size_) throw ParseError("trailing bytes after payload", offset_);
    return std::nullopt;
  }
  const std::uint32_t nv = read_u32("n_visual");
  const std::uint32_t na = read_u32("n_audio");
  auto rows = [&](std::uint32_t n, const char* what) {
    const std::uint64_t bytes = std::uint64_t{n} * dim_ * 4;
    if (offset_ + bytes > size_) {
      throw ParseError(std::string("truncated ") + what + ": need " + std::to_string(bytes) +
                           " bytes, have " + std::to_string(size_ - offset_),
                       offset_);
    }
    scratch_.resize(bytes);
    read_exact(scratch_.data(), bytes, what);
    std::vector<float> data(std::size_t{n} * dim_);
    for (std::size_t i = 0; i < data.size(); ++i) {
      const std::uint8_t* p = scratch_.data() + 4 * i;
      data[i] = std::bit_cast<float>(std::uint32_t{p[0]} | (std::uint32_t{p[1]} << 8) |
                                     (std::uint32_t{p[2]} << 16) | (std::uint32_t{p[3]} << 24));
    }
    return Matrix<float>::from_data(n, dim_, std::move(data), false);
  };
  StreamFrame f;
  f.visual = rows(nv, "visual rows");
  f.audio = rows(na, "audio rows");
  ++read_;
  return f;
}

fs::path metadata_path(const fs::path& stream_path) {
  fs::path p = stream_path;
  p += ".json";
  return p;
}

void write_metadata(const fs::path& stream_path, const nlohmann::json& meta) {
  write_file_atomic(metadata_path(stream_path), meta.dump(2) + "\n");
}

nlohmann::json read_metadata(const fs::path& stream_path) {
  const auto bytes = read_file_bytes(metadata_path(stream_path));
  try {
    return nlohmann::json::parse(bytes.begin(), bytes.end());
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(std::string("metadata: ") + e.what(), e.byte);
  }
}

}  // namespace fastmem
