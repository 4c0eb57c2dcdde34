#pragma once

#include <cstdint>
#include <initializer_list>
#include <string_view>

namespace xpool {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Seed for a named sub-stream of a base seed, optionally keyed by indices
/// (step, row, column, ...). Stream names keep shuffling, dropout and
/// augmentation independent while all flowing from one user seed.
inline std::uint64_t derive_seed(std::uint64_t base, std::string_view stream,
                                 std::initializer_list<std::uint64_t> keys = {}) {
  std::uint64_t h = splitmix64(base);
  for (unsigned char c : stream) h = splitmix64(h ^ c);
  for (std::uint64_t k : keys) h = splitmix64(h ^ k);
  return h;
}

}  // namespace xpool
