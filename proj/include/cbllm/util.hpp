#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace cbllm {

// 64-bit FNV-1a. Fixed constants so hashes are stable across platforms.
inline constexpr std::uint64_t kFnvOffset = 1469598103934665603ULL;
inline constexpr std::uint64_t kFnvPrime = 1099511628211ULL;

inline std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h = kFnvOffset) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= kFnvPrime;
  }
  return h;
}

inline std::uint64_t fnv1a_bytes(const void* data, std::size_t n, std::uint64_t h = kFnvOffset) {
  return fnv1a(std::string_view(static_cast<const char*>(data), n), h);
}

std::string hex64(std::uint64_t v);

// Uniform index in [0, n) from a 64-bit engine. Written out (rather than
// std::uniform_int_distribution) so generated corpora are identical across
// standard libraries.
inline std::size_t draw_index(std::mt19937_64& rng, std::size_t n) {
  // Rejection sampling removes modulo bias.
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
  std::uint64_t x;
  do {
    x = rng();
  } while (x >= limit);
  return static_cast<std::size_t>(x % n);
}

// Uniform double in [0, 1) with 53 random bits.
inline double draw_unit(std::mt19937_64& rng) { return double(rng() >> 11) * 0x1.0p-53; }

// Standard normal via Box-Muller on draw_unit (portable across standard libraries).
inline double draw_normal(std::mt19937_64& rng) {
  double u1 = draw_unit(rng), u2 = draw_unit(rng);
  if (u1 < 1e-300) u1 = 1e-300;
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
}

// Fisher-Yates with draw_index.
template <class T>
void shuffle_in_place(std::vector<T>& v, std::mt19937_64& rng) {
  for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[draw_index(rng, i)]);
}

std::string read_file(const std::string& path);
void write_file(const std::string& path, std::string_view contents);

// Little-endian float32 serialization (the checkpoint/embedding array format).
std::string floats_to_le_bytes(std::span<const float> values);
std::vector<float> floats_from_le_bytes(std::string_view bytes);

}  // namespace cbllm
