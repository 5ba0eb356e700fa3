#pragma once

// Little-endian primitive encoding shared by the dataset and checkpoint formats.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "metta/errors.hpp"

namespace metta::io {

class Writer {
 public:
  void bytes(std::string_view s) { buf_.insert(buf_.end(), s.begin(), s.end()); }
  void u8(std::uint8_t v) { buf_.push_back(static_cast<char>(v)); }
  void u16(std::uint16_t v) { put(v, 2); }
  void u32(std::uint32_t v) { put(v, 4); }
  void f32(float v) { put(std::bit_cast<std::uint32_t>(v), 4); }
  void f32s(std::span<const float> vs) {
    for (float v : vs) f32(v);
  }

  const std::vector<char>& buffer() const noexcept { return buf_; }

  void save(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out.write(buf_.data(), static_cast<std::streamsize>(buf_.size()));
    if (!out) throw IoError("write failed for " + path.string());
  }

 private:
  void put(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
  }
  std::vector<char> buf_;
};

class Reader {
 public:
  Reader(std::vector<char> data, std::string what) : data_(std::move(data)), what_(std::move(what)) {}

  static Reader open(const std::filesystem::path& path, std::string what) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    std::vector<char> data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (in.bad()) throw IoError("read failed for " + path.string());
    return Reader(std::move(data), std::move(what));
  }

  std::string bytes(std::size_t n) {
    need(n);
    std::string s(data_.data() + pos_, n);
    pos_ += n;
    return s;
  }
  std::uint8_t u8() { return static_cast<std::uint8_t>(get(1)); }
  std::uint16_t u16() { return static_cast<std::uint16_t>(get(2)); }
  std::uint32_t u32() { return static_cast<std::uint32_t>(get(4)); }
  float f32() { return std::bit_cast<float>(static_cast<std::uint32_t>(get(4))); }
  void f32s(std::span<float> out) {
    need(out.size() * 4);
    for (float& v : out) v = f32();
  }

  std::size_t remaining() const noexcept { return data_.size() - pos_; }

  void expect_end() const {
    if (remaining() != 0) throw FormatError(what_ + ": " + std::to_string(remaining()) + " trailing bytes");
  }

 private:
  void need(std::size_t n) const {
    if (remaining() < n) throw FormatError(what_ + ": truncated file");
  }
  std::uint64_t get(int n) {
    need(static_cast<std::size_t>(n));
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    pos_ += static_cast<std::size_t>(n);
    return v;
  }

  std::vector<char> data_;
  std::size_t pos_ = 0;
  std::string what_;
};

}  // namespace metta::io
