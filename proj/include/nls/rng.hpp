#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace nls {

using Rng = std::mt19937_64;

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

/// Counter-based stream derivation: the seed for a task is a pure function of
/// the root seed and the task's index path, independent of execution order.
inline std::uint64_t derive_seed(std::uint64_t root, std::initializer_list<std::uint64_t> path) {
  std::uint64_t s = splitmix64(root);
  for (auto p : path) s = splitmix64(s ^ splitmix64(p + 0x632be59bd9b4e019ull));
  return s;
}

// Stream tags keep unrelated consumers of one root seed apart.
namespace stream {
inline constexpr std::uint64_t kLhs = 1;
inline constexpr std::uint64_t kField = 2;
inline constexpr std::uint64_t kPermutation = 3;
inline constexpr std::uint64_t kInit = 4;
inline constexpr std::uint64_t kShuffle = 5;
inline constexpr std::uint64_t kEval = 6;
inline constexpr std::uint64_t kGodambe = 7;
inline constexpr std::uint64_t kRestart = 8;
}  // namespace stream

}  // namespace nls
