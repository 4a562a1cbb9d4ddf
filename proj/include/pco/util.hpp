#pragma once

#include <charconv>
#include <cstdint>
#include <string>
#include <string_view>

namespace pco::util {

// Shortest round-trip decimal form of a double. Used for every number we
// put into CSV or text reports so re-exports are byte-identical.
inline std::string fmt_double(double v) {
  char buf[32];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  (void)ec;
  return std::string(buf, ptr);
}

// FNV-1a over raw bytes, hex encoded. Cheap content digest for manifests.
std::string fnv1a_hex(std::string_view bytes);

std::string read_file(const std::string& path);

}  // namespace pco::util
