#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace mocomsi {

inline constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// A named position in the seed tree. Streams are split by mixing in an index,
// so sibling streams never overlap and the tree is reproducible from the root.
class RngStream {
 public:
  constexpr RngStream() = default;
  constexpr explicit RngStream(std::uint64_t key) : key_(key) {}

  constexpr RngStream split(std::uint64_t index) const noexcept {
    return RngStream(splitmix64(key_ ^ splitmix64(index + 0x632be59bd9b4e019ULL)));
  }
  constexpr std::uint64_t key() const noexcept { return key_; }
  std::mt19937_64 engine() const { return std::mt19937_64(splitmix64(key_)); }

  friend constexpr bool operator==(RngStream, RngStream) = default;

 private:
  std::uint64_t key_ = 0;
};

// Portable uniform draws. std::uniform_real_distribution is implementation
// defined, so on-disk artifacts derive their randomness from these instead.
inline double uniform01(std::mt19937_64& gen) {
  return static_cast<double>(gen() >> 11) * 0x1.0p-53;
}

inline double uniform(std::mt19937_64& gen, double lo, double hi) {
  return lo + (hi - lo) * uniform01(gen);
}

inline std::uint64_t uniform_index(std::mt19937_64& gen, std::uint64_t n) {
  // Rejection sampling keeps the draw unbiased.
  const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
  std::uint64_t r;
  do {
    r = gen();
  } while (r >= limit);
  return r % n;
}

inline double normal(std::mt19937_64& gen) {
  // Box-Muller; one value per call keeps the stream layout simple.
  double u1 = uniform01(gen);
  while (u1 <= 0.0) u1 = uniform01(gen);
  const double u2 = uniform01(gen);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
}

template <typename It>
void shuffle(It first, It last, std::mt19937_64& gen) {
  const auto n = static_cast<std::uint64_t>(last - first);
  for (std::uint64_t i = n; i > 1; --i) {
    const auto j = uniform_index(gen, i);
    std::swap(first[i - 1], first[j]);
  }
}

}  // namespace mocomsi
