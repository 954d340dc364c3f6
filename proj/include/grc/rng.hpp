#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

namespace grc {

/// SplitMix64 finalizer. Reproducible in any language with 64-bit unsigned math.
constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Counter-based generator: value i of stream s under seed k is a pure
/// function of (k, s, i). Used for weight init so parameter bytes are
/// reproducible independently of iteration order.
class CounterRng {
 public:
  CounterRng(std::uint64_t seed, std::uint64_t stream)
      : key_(splitmix64(seed ^ splitmix64(stream + 0x632be59bd9b4e019ULL))) {}

  std::uint64_t bits(std::uint64_t counter) const { return splitmix64(key_ + counter * 0x9e3779b97f4a7c15ULL); }

  /// Uniform in (0, 1), 53-bit resolution.
  double uniform(std::uint64_t counter) const {
    return (double(bits(counter) >> 11) + 0.5) * (1.0 / 9007199254740992.0);
  }

  /// Standard normal via Box-Muller on counters 2i and 2i+1 (cosine branch).
  double normal(std::uint64_t i) const {
    const double u1 = uniform(2 * i), u2 = uniform(2 * i + 1);
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

 private:
  std::uint64_t key_;
};

/// 64-bit FNV-1a, used for fingerprints, prefix-block hashes and file names.
class Fnv64 {
 public:
  Fnv64& bytes(const void* data, std::size_t n) {
    auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      h_ ^= p[i];
      h_ *= 0x100000001b3ULL;
    }
    return *this;
  }
  template <class T>
  Fnv64& value(const T& v) {
    return bytes(&v, sizeof(T));
  }
  std::uint64_t digest() const { return h_; }

 private:
  std::uint64_t h_ = 0xcbf29ce484222325ULL;
};

}  // namespace grc
