// Counter-based random number generation.
//
// Rng wraps a Philox4x32-10 block cipher keyed by a 64-bit stream key. Every
// draw is a pure function of (key, counter), so a generator can be split into
// independent child streams by hashing the parent key with a stream id. Each
// consumer (a pair, a worker, a pass) gets its own child stream, which keeps
// parallel work reproducible irrespective of scheduling.
#pragma once

#include <array>
#include <cstdint>
#include <limits>

namespace prnet {

namespace detail {

inline constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

inline std::array<std::uint32_t, 4> philox4x32_10(std::array<std::uint32_t, 4> ctr,
                                                  std::array<std::uint32_t, 2> key) {
  constexpr std::uint32_t kMul0 = 0xD2511F53u;
  constexpr std::uint32_t kMul1 = 0xCD9E8D57u;
  constexpr std::uint32_t kWeyl0 = 0x9E3779B9u;
  constexpr std::uint32_t kWeyl1 = 0xBB67AE85u;
  for (int round = 0; round < 10; ++round) {
    const std::uint64_t p0 = static_cast<std::uint64_t>(kMul0) * ctr[0];
    const std::uint64_t p1 = static_cast<std::uint64_t>(kMul1) * ctr[2];
    const auto hi0 = static_cast<std::uint32_t>(p0 >> 32);
    const auto lo0 = static_cast<std::uint32_t>(p0);
    const auto hi1 = static_cast<std::uint32_t>(p1 >> 32);
    const auto lo1 = static_cast<std::uint32_t>(p1);
    ctr = {hi1 ^ ctr[1] ^ key[0], lo1, hi0 ^ ctr[3] ^ key[1], lo0};
    key[0] += kWeyl0;
    key[1] += kWeyl1;
  }
  return ctr;
}

}  // namespace detail

/// Seedable, splittable counter-based generator. Satisfies
/// UniformRandomBitGenerator, so it plugs into <random> distributions.
class Rng {
 public:
  using result_type = std::uint64_t;

  explicit Rng(std::uint64_t seed = 0) : key_(detail::splitmix64(seed)) {}

  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }

  result_type operator()() {
    if (lane_ == 0) {
      const std::array<std::uint32_t, 4> ctr{
          static_cast<std::uint32_t>(counter_), static_cast<std::uint32_t>(counter_ >> 32), 0u,
          0u};
      const std::array<std::uint32_t, 2> key{static_cast<std::uint32_t>(key_),
                                             static_cast<std::uint32_t>(key_ >> 32)};
      block_ = detail::philox4x32_10(ctr, key);
      ++counter_;
    }
    const std::uint64_t out = (static_cast<std::uint64_t>(block_[2 * lane_]) << 32) |
                              block_[2 * lane_ + 1];
    lane_ = (lane_ + 1) % 2;
    return out;
  }

  /// Child stream `stream` of this generator. Independent of how many draws
  /// the parent has made.
  [[nodiscard]] Rng split(std::uint64_t stream) const {
    Rng child;
    child.key_ = detail::splitmix64(key_ ^ detail::splitmix64(stream + 0x632BE59BD9B4E019ULL));
    return child;
  }

  /// Uniform double in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>((*this)() >> 11) * 0x1.0p-53; }

  /// Uniform double in [lo, hi).
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n). Uses rejection to avoid modulo bias.
  std::uint64_t below(std::uint64_t n) {
    if (n <= 1) return 0;
    const std::uint64_t limit = max() - max() % n;
    std::uint64_t x = 0;
    do {
      x = (*this)();
    } while (x >= limit);
    return x % n;
  }

  [[nodiscard]] std::uint64_t key() const { return key_; }
  [[nodiscard]] std::uint64_t counter() const { return counter_; }

 private:
  std::uint64_t key_ = 0;
  std::uint64_t counter_ = 0;
  std::array<std::uint32_t, 4> block_{};
  int lane_ = 0;
};

}  // namespace prnet
