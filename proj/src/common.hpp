#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace tmg {

using Shape = std::vector<int64_t>;

inline int64_t numel_of(const Shape& s) {
  int64_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string r = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) r += ",";
    r += std::to_string(s[i]);
  }
  return r + "]";
}

[[noreturn]] inline void fail(const std::string& msg) { throw std::runtime_error(msg); }

inline void check(bool ok, const std::string& msg) {
  if (!ok) fail(msg);
}

// FNV-1a, used to derive per-scene seeds from string ids.
inline uint64_t fnv1a64(const std::string& s) {
  uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace tmg
