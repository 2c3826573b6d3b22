#include "valerian/common.hpp"

#include <atomic>
#include <iostream>

namespace valerian {

namespace {
std::atomic<bool> g_warnings_enabled{true};
std::atomic<std::size_t> g_warning_count{0};
}  // namespace

std::uint64_t mix_seed(std::uint64_t base, std::uint64_t stream) {
  std::uint64_t z = base + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

std::uint64_t mix_seed(std::uint64_t base, std::string_view tag) {
  // FNV-1a
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (unsigned char c : tag) {
    h ^= c;
    h *= 0x100000001B3ULL;
  }
  return mix_seed(base, h);
}

void warn(const std::string& message) {
  ++g_warning_count;
  if (g_warnings_enabled) std::cerr << "warning: " << message << '\n';
}

void set_warnings_enabled(bool enabled) { g_warnings_enabled = enabled; }

std::size_t warning_count() { return g_warning_count; }

}  // namespace valerian
