#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace gvq {

/// SplitMix64 finalizer. Used to derive independent stream seeds from a
/// run seed plus structural tags (slice index, iteration, node, ...).
inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

inline std::uint64_t mix_seed(std::uint64_t h) { return splitmix64(h); }

template <typename... Rest>
std::uint64_t mix_seed(std::uint64_t h, std::uint64_t next, Rest... rest) {
  return mix_seed(splitmix64(h) ^ (next + 0x632be59bd9b4e019ull), rest...);
}

/// Deterministic random stream. mt19937_64 is fully specified by the
/// standard and the uniform/normal transforms below avoid the
/// implementation-defined std distributions, so identical seeds give
/// identical streams on every platform.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t bits() { return engine_(); }

  /// Uniform on [0, 1) with 53 random mantissa bits.
  double uniform() { return static_cast<double>(bits() >> 11) * 0x1.0p-53; }

  /// Standard normal via Box-Muller; caches the sine partner.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u = 1.0 - uniform();  // (0, 1]
    double v = uniform();
    double radius = std::sqrt(-2.0 * std::log(u));
    double angle = 2.0 * M_PI * v;
    spare_ = radius * std::sin(angle);
    has_spare_ = true;
    return radius * std::cos(angle);
  }

  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) { return bits() % n; }

 private:
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace gvq
