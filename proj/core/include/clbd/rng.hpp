#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace clbd {

using Rng = std::mt19937_64;

/// splitmix64 finaliser; used to derive independent stream seeds.
constexpr std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

constexpr std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> parts) {
  std::uint64_t s = mix64(base);
  for (auto p : parts) s = mix64(s ^ mix64(p + 0x632be59bd9b4e019ULL));
  return s;
}

}  // namespace clbd
