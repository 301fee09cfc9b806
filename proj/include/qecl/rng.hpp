#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <string_view>

namespace qecl {

// Deterministic seed derivation: every consumer of randomness draws from a
// named sub-stream of the root seed, so changing worker counts or adding a
// stage never perturbs unrelated streams.
inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t child_seed(std::uint64_t root, std::string_view stream,
                                std::uint64_t index = 0) {
  std::uint64_t h = root;
  for (char c : stream) h = splitmix64(h ^ static_cast<std::uint64_t>(static_cast<unsigned char>(c)));
  return splitmix64(h ^ index);
}

inline std::mt19937_64 make_engine(std::uint64_t root, std::string_view stream,
                                   std::uint64_t index = 0) {
  return std::mt19937_64(child_seed(root, stream, index));
}

}  // namespace qecl
