// Copyright 2026 The StemForge Authors
// SPDX-License-Identifier: Apache-2.0

#include "stemforge/binio.hpp"

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>

#include "stemforge/error.hpp"

namespace stemforge::binio {

static_assert(std::endian::native == std::endian::little, "little-endian host required");

std::uint32_t crc32(std::span<const std::uint8_t> bytes) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed large buffers in chunks
  std::size_t off = 0;
  while (off < bytes.size()) {
    const std::size_t n = std::min<std::size_t>(bytes.size() - off, 1u << 30);
    crc = ::crc32(crc, bytes.data() + off, static_cast<uInt>(n));
    off += n;
  }
  return static_cast<std::uint32_t>(crc);
}

namespace {

template <typename T>
void put(std::vector<std::uint8_t>& buf, T v) {
  std::uint8_t raw[sizeof(T)];
  std::memcpy(raw, &v, sizeof(T));
  buf.insert(buf.end(), raw, raw + sizeof(T));
}

}  // namespace

void Writer::magic(std::string_view m) {
  buf_.insert(buf_.end(), m.begin(), m.end());
}
void Writer::u32(std::uint32_t v) { put(buf_, v); }
void Writer::u64(std::uint64_t v) { put(buf_, v); }
void Writer::f32(float v) { put(buf_, v); }
void Writer::f64(double v) { put(buf_, v); }
void Writer::str(std::string_view s) {
  u32(static_cast<std::uint32_t>(s.size()));
  buf_.insert(buf_.end(), s.begin(), s.end());
}
void Writer::seal() { u32(crc32(buf_)); }

Reader::Reader(std::span<const std::uint8_t> sealed, std::string what)
    : data_(sealed), what_(std::move(what)) {
  if (sealed.size() < 4) fail(ErrorCode::Format, what_ + ": truncated file");
  end_ = sealed.size() - 4;
  std::uint32_t stored;
  std::memcpy(&stored, sealed.data() + end_, 4);
  if (stored != crc32(sealed.first(end_)))
    fail(ErrorCode::Format, what_ + ": CRC mismatch");
}

void Reader::need(std::size_t n) const {
  if (end_ - pos_ < n) fail(ErrorCode::Format, what_ + ": truncated record");
}

void Reader::expect_magic(std::string_view m) {
  need(m.size());
  if (std::memcmp(data_.data() + pos_, m.data(), m.size()) != 0)
    fail(ErrorCode::Format, what_ + ": bad magic");
  pos_ += m.size();
}

std::span<const std::uint8_t> Reader::bytes(std::size_t n) {
  need(n);
  auto out = data_.subspan(pos_, n);
  pos_ += n;
  return out;
}

namespace {

template <typename T>
T get(Reader& r) {
  T v;
  std::memcpy(&v, r.bytes(sizeof(T)).data(), sizeof(T));
  return v;
}

}  // namespace

std::uint32_t Reader::u32() { return get<std::uint32_t>(*this); }
std::uint64_t Reader::u64() { return get<std::uint64_t>(*this); }
float Reader::f32() { return get<float>(*this); }
double Reader::f64() { return get<double>(*this); }

std::string Reader::str() {
  const std::uint32_t n = u32();
  auto b = bytes(n);
  return std::string(b.begin(), b.end());
}

void Reader::expect_done() const {
  if (!done()) fail(ErrorCode::Format, what_ + ": trailing bytes before CRC");
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::NotFound, "cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorCode::InvalidInput, "cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    if (!out) fail(ErrorCode::InvalidInput, "write failed for " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace stemforge::binio
