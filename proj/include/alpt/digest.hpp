#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "alpt/error.hpp"

namespace alpt {

// FNV-1a, 64-bit. A content fingerprint for the stale-artifact guard, not a
// cryptographic hash.
inline uint64_t fnv1a64(const void* data, size_t n, uint64_t h = 0xcbf29ce484222325ull) {
  const auto* p = static_cast<const uint8_t*>(data);
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

inline uint64_t fnv1a64(const std::vector<uint8_t>& bytes) {
  return fnv1a64(bytes.data(), bytes.size());
}

inline std::string digest_to_hex(uint64_t h) {
  static const char* k = "0123456789abcdef";
  std::string s = "fnv1a64:";
  for (int i = 15; i >= 0; --i) s += k[(h >> (4 * i)) & 0xf];
  return s;
}

inline std::string file_digest(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), ErrorCategory::Io, "cannot open for digest: " + path.string());
  uint64_t h = 0xcbf29ce484222325ull;
  char buf[1 << 16];
  while (in.read(buf, sizeof(buf)) || in.gcount() > 0)
    h = fnv1a64(buf, static_cast<size_t>(in.gcount()), h);
  return digest_to_hex(h);
}

}  // namespace alpt
