#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <vector>

namespace ssd {

// SplitMix64 finalizer. Bijective on 64-bit words, good avalanche.
inline constexpr std::uint64_t mix64(std::uint64_t z) {
  z += 0x9E3779B97F4A7C15ull;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

// Stateless counter-based random stream.
//
// Every draw is a pure function of (base_seed, a, b, c, i), so masks and
// noise sequences are reproducible independent of evaluation order,
// batching, or thread count. Keys are cheap value types; derive one per
// (sample, pass, site) and index draws by element position.
class RngStream {
 public:
  explicit RngStream(std::uint64_t base_seed) : base_(base_seed) {}

  std::uint64_t base_seed() const { return base_; }

  // Independent stream for a different role (teacher vs student, init vs
  // shuffle, ...). Forking with distinct tags decorrelates the streams.
  RngStream fork(std::uint64_t tag) const {
    return RngStream(mix64(base_ ^ mix64(tag ^ 0xA3C59AC2F0110C51ull)));
  }

  struct Key {
    std::uint64_t k;

    std::uint64_t bits(std::uint64_t i) const {
      return mix64(k ^ mix64(i + 0x632BE59BD9B4E019ull));
    }
    // Uniform in [0, 1) with 24 mantissa bits.
    float uniform(std::uint64_t i) const {
      return static_cast<float>(bits(i) >> 40) * 0x1.0p-24f;
    }
    // Uniform in [0, 1) with 53 mantissa bits.
    double uniform64(std::uint64_t i) const {
      return static_cast<double>(bits(i) >> 11) * 0x1.0p-53;
    }
    // Keep with probability 1-p (inverted-dropout convention).
    bool keep(std::uint64_t i, double p) const { return uniform64(i) >= p; }
    // Standard normal via Box-Muller; draw i consumes uniforms 2i, 2i+1.
    double normal(std::uint64_t i) const {
      double u1 = uniform64(2 * i);
      double u2 = uniform64(2 * i + 1);
      return std::sqrt(-2.0 * std::log1p(-u1)) *
             std::cos(2.0 * std::numbers::pi * u2);
    }
    // Unbiased-enough integer in [0, n) via 128-bit multiply.
    std::uint64_t below(std::uint64_t i, std::uint64_t n) const {
      return static_cast<std::uint64_t>(
          (static_cast<unsigned __int128>(bits(i)) * n) >> 64);
    }
  };

  Key key(std::uint64_t a, std::uint64_t b = 0, std::uint64_t c = 0) const {
    std::uint64_t k = mix64(base_ ^ mix64(a));
    k = mix64(k ^ mix64(b ^ 0x9E6C63D0876A9F7Bull));
    k = mix64(k ^ mix64(c ^ 0xC1F651C67C62C6E0ull));
    return Key{k};
  }

 private:
  std::uint64_t base_;
};

// In-place Fisher-Yates driven by a stream key; independent of stdlib
// distribution internals.
template <typename T>
void seeded_shuffle(std::vector<T>& v, RngStream::Key key) {
  for (std::size_t i = v.size(); i > 1; --i) {
    std::size_t j = static_cast<std::size_t>(key.below(i, i));
    std::swap(v[i - 1], v[j]);
  }
}

}  // namespace ssd
