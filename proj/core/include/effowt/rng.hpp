#pragma once

#include <cmath>
#include <cstdint>

namespace effowt {

/// splitmix64 stream; all distributions derive from raw bits so that
/// sequences are identical across platforms and standard libraries.
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed + 0x9E3779B97F4A7C15ULL) {}

  uint64_t next() {
    uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  /// Uniform in [0,1).
  double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0,n).
  int64_t uniform_int(int64_t n) {
    return static_cast<int64_t>((static_cast<__uint128_t>(next()) *
                                 static_cast<__uint128_t>(n)) >> 64);
  }

  /// Standard normal via Box-Muller on our own uniforms.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = 0.0;
    while (u1 == 0.0) u1 = uniform();
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double theta = 6.283185307179586477 * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  /// Normal(0, std) resampled into [-2 std, 2 std].
  double trunc_normal(double std_dev) {
    for (;;) {
      double v = normal();
      if (v >= -2.0 && v <= 2.0) return v * std_dev;
    }
  }

  /// Independent child stream.
  Rng fork(uint64_t stream) {
    uint64_t s = state_ ^ (0xD6E8FEB86659FD93ULL * (stream + 1));
    Rng child(s);
    child.next();
    return child;
  }

 private:
  uint64_t state_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace effowt
