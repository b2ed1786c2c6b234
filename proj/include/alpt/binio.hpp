#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "alpt/error.hpp"

namespace alpt {

// Little-endian binary writer/reader over whole files. All container
// formats in this project (datasets, checkpoints) go through these so the
// byte layout is pinned in one place.

class BinWriter {
 public:
  void put_bytes(const void* p, size_t n) {
    const auto* b = static_cast<const uint8_t*>(p);
    buf_.insert(buf_.end(), b, b + n);
  }
  void put_u8(uint8_t v) { put_bytes(&v, 1); }
  void put_u32(uint32_t v) { put_le(v); }
  void put_u64(uint64_t v) { put_le(v); }
  void put_i64(int64_t v) { put_le(static_cast<uint64_t>(v)); }
  void put_f32(float v) {
    uint32_t bits;
    std::memcpy(&bits, &v, 4);
    put_le(bits);
  }
  void put_f64(double v) {
    uint64_t bits;
    std::memcpy(&bits, &v, 8);
    put_le(bits);
  }
  void put_string(const std::string& s) {
    put_u32(static_cast<uint32_t>(s.size()));
    put_bytes(s.data(), s.size());
  }

  const std::vector<uint8_t>& bytes() const { return buf_; }

  void write_file(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    require(out.good(), ErrorCategory::Io, "cannot open for write: " + path.string());
    out.write(reinterpret_cast<const char*>(buf_.data()),
              static_cast<std::streamsize>(buf_.size()));
    require(out.good(), ErrorCategory::Io, "write failed: " + path.string());
  }

 private:
  template <typename T>
  void put_le(T v) {
    uint8_t b[sizeof(T)];
    for (size_t i = 0; i < sizeof(T); ++i) b[i] = static_cast<uint8_t>(v >> (8 * i));
    put_bytes(b, sizeof(T));
  }

  std::vector<uint8_t> buf_;
};

class BinReader {
 public:
  explicit BinReader(std::vector<uint8_t> bytes) : buf_(std::move(bytes)) {}

  static BinReader from_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary | std::ios::ate);
    require(in.good(), ErrorCategory::Io, "cannot open: " + path.string());
    auto size = static_cast<size_t>(in.tellg());
    in.seekg(0);
    std::vector<uint8_t> bytes(size);
    in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(size));
    require(in.good(), ErrorCategory::Io, "read failed: " + path.string());
    return BinReader(std::move(bytes));
  }

  void get_bytes(void* p, size_t n) {
    require(pos_ + n <= buf_.size(), ErrorCategory::Format, "truncated input");
    std::memcpy(p, buf_.data() + pos_, n);
    pos_ += n;
  }
  uint8_t get_u8() {
    uint8_t v;
    get_bytes(&v, 1);
    return v;
  }
  uint32_t get_u32() { return get_le<uint32_t>(); }
  uint64_t get_u64() { return get_le<uint64_t>(); }
  int64_t get_i64() { return static_cast<int64_t>(get_le<uint64_t>()); }
  float get_f32() {
    uint32_t bits = get_le<uint32_t>();
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
  }
  double get_f64() {
    uint64_t bits = get_le<uint64_t>();
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
  }
  std::string get_string() {
    uint32_t n = get_u32();
    require(pos_ + n <= buf_.size(), ErrorCategory::Format, "truncated string");
    std::string s(reinterpret_cast<const char*>(buf_.data() + pos_), n);
    pos_ += n;
    return s;
  }

  size_t remaining() const { return buf_.size() - pos_; }

 private:
  template <typename T>
  T get_le() {
    uint8_t b[sizeof(T)];
    get_bytes(b, sizeof(T));
    T v = 0;
    for (size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(b[i]) << (8 * i);
    return v;
  }

  std::vector<uint8_t> buf_;
  size_t pos_ = 0;
};

}  // namespace alpt
