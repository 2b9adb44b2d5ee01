#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

#include <Eigen/Core>

namespace affagg {

// SplitMix64 finalizer (Steele/Lea/Vigna).
inline std::uint64_t mix64(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

// Stream seed for trial `index` under `master_seed`. Pure function, so any
// worker can rebuild any trial's stream without shared state.
inline std::uint64_t derive_stream_seed(std::uint64_t master_seed, std::uint64_t index) {
  return mix64(master_seed + 0x9E3779B97F4A7C15ull * (index + 1));
}

// Counter-style SplitMix64 generator. Uniforms take the top 53 bits;
// gaussians come from Box-Muller with a fixed draw order (two uniforms per
// pair, cosine branch returned first), so a given seed reproduces the exact
// same stream on every run.
class RandomStream {
 public:
  explicit RandomStream(std::uint64_t seed) : state_(seed), seed_(seed) {}

  RandomStream(std::uint64_t master_seed, std::uint64_t index)
      : RandomStream(derive_stream_seed(master_seed, index)) {}

  std::uint64_t seed() const { return seed_; }

  std::uint64_t next_u64() {
    state_ += 0x9E3779B97F4A7C15ull;
    return mix64(state_);
  }

  // Uniform on [0,1).
  double uniform01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double gaussian() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = uniform01();
    while (u1 == 0.0) u1 = uniform01();
    const double u2 = uniform01();
    const double radius = std::sqrt(-2.0 * std::log(u1));
    const double angle = 2.0 * std::numbers::pi * u2;
    spare_ = radius * std::sin(angle);
    have_spare_ = true;
    return radius * std::cos(angle);
  }

  Eigen::VectorXd gaussian_vector(Eigen::Index n) {
    Eigen::VectorXd z(n);
    for (Eigen::Index i = 0; i < n; ++i) z(i) = gaussian();
    return z;
  }

 private:
  std::uint64_t state_;
  std::uint64_t seed_;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

}  // namespace affagg
