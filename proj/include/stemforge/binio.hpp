// Copyright 2026 The StemForge Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Little-endian byte buffers with a trailing CRC32 (zlib polynomial).

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace stemforge::binio {

std::uint32_t crc32(std::span<const std::uint8_t> bytes);

class Writer {
 public:
  void bytes(std::span<const std::uint8_t> b) { buf_.insert(buf_.end(), b.begin(), b.end()); }
  void magic(std::string_view m);
  void u32(std::uint32_t v);
  void u64(std::uint64_t v);
  void f32(float v);
  void f64(double v);
  void str(std::string_view s);  // u32 length + bytes

  /// Appends CRC32 of everything written so far.
  void seal();
  const std::vector<std::uint8_t>& buffer() const noexcept { return buf_; }
  std::vector<std::uint8_t> take() { return std::move(buf_); }

 private:
  std::vector<std::uint8_t> buf_;
};

/// Reads a sealed buffer. The constructor checks the trailing CRC; every
/// read past the payload raises a Format error.
class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> sealed, std::string what);

  void expect_magic(std::string_view m);
  std::uint32_t u32();
  std::uint64_t u64();
  float f32();
  double f64();
  std::string str();
  std::span<const std::uint8_t> bytes(std::size_t n);

  bool done() const noexcept { return pos_ == end_; }
  std::size_t remaining() const noexcept { return end_ - pos_; }
  void expect_done() const;

 private:
  void need(std::size_t n) const;
  std::span<const std::uint8_t> data_;
  std::size_t pos_ = 0;
  std::size_t end_ = 0;
  std::string what_;
};

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
/// Writes through a temporary file and renames it into place.
void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

}  // namespace stemforge::binio
