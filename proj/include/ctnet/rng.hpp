#pragma once

#include <cmath>
#include <cstdint>
#include <string>

namespace ctnet {

// Deterministic counter-based generator. The core step is splitmix64:
//
//   state += 0x9e3779b97f4a7c15
//   z = state; z = (z ^ z>>30) * 0xbf58476d1ce4e5b9
//   z = (z ^ z>>27) * 0x94d049bb133111eb
//   output = z ^ z>>31
//
// Independent streams are derived by folding stream ids through the same
// mixing function, so a tuple (seed, id_a, id_b, id_c) fully determines the
// sequence on any platform. Gaussians come from Box-Muller over pairs of
// uniforms, with the second value of each pair cached.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  static std::uint64_t mix(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  static Rng keyed(std::uint64_t seed, std::uint64_t a = 0, std::uint64_t b = 0,
                   std::uint64_t c = 0) {
    std::uint64_t h = mix(seed + 0x9e3779b97f4a7c15ULL);
    h = mix(h ^ (a + 0x9e3779b97f4a7c15ULL));
    h = mix(h ^ (b + 0x6a09e667f3bcc909ULL));
    h = mix(h ^ (c + 0xbb67ae8584caa73bULL));
    return Rng(h);
  }

  std::uint64_t next_u64() {
    state_ += 0x9e3779b97f4a7c15ULL;
    return mix(state_);
  }

  // Uniform in [0, 1), 53-bit resolution.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n) via the multiply-shift reduction.
  std::uint64_t uniform_below(std::uint64_t n) {
    return static_cast<std::uint64_t>(
        (static_cast<unsigned __int128>(next_u64()) * n) >> 64);
  }

  // Standard normal via Box-Muller; u1 is shifted into (0, 1] so log is safe.
  double gaussian() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = 1.0 - uniform();
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

 private:
  std::uint64_t state_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// FNV-1a, used to key per-parameter init streams by canonical name.
inline std::uint64_t hash_name(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace ctnet
