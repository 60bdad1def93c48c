#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <vector>

namespace dunst {

// splitmix64 step; used to mix seeds and tags into well-spread stream seeds.
inline uint64_t mix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d4a2c62ed4d6e5ULL;
  return x ^ (x >> 31);
}

// Derive an independent stream seed from a base seed and one or more tags.
inline uint64_t derive_seed(uint64_t seed, uint64_t tag) {
  return mix64(mix64(seed) ^ tag);
}
inline uint64_t derive_seed(uint64_t seed, uint64_t tag_a, uint64_t tag_b) {
  return mix64(derive_seed(seed, tag_a) ^ mix64(tag_b));
}

// Deterministic RNG: mt19937_64 core (bit-exact per the standard) with
// explicit uniform / Box-Muller / categorical transforms so that sampled
// values are reproducible across platforms for a fixed seed.
class Rng {
 public:
  explicit Rng(uint64_t seed) : engine_(seed) {}

  uint64_t next_u64() { return engine_(); }

  // Uniform on [0, 1) with 53-bit resolution.
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  // Uniform integer in [0, n).
  int uniform_int(int n) {
    if (n <= 0) throw std::invalid_argument("uniform_int: n must be positive");
    return static_cast<int>(uniform() * static_cast<double>(n)) % n;
  }

  // Standard normal via Box-Muller; the sine mate is cached.
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = 1.0 - uniform();  // (0, 1], keeps log finite
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double theta = 2.0 * M_PI * u2;
    spare_ = r * std::sin(theta);
    have_spare_ = true;
    return r * std::cos(theta);
  }

  // Index draw from an explicit probability vector (need not be exactly
  // normalized; a trailing fp residue falls through to the last index).
  int categorical(const std::vector<double>& probs) {
    if (probs.empty()) throw std::invalid_argument("categorical: empty probs");
    double u = uniform();
    double acc = 0.0;
    for (size_t i = 0; i < probs.size(); ++i) {
      acc += probs[i];
      if (u < acc) return static_cast<int>(i);
    }
    return static_cast<int>(probs.size()) - 1;
  }

  // Fisher-Yates shuffle.
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = static_cast<size_t>(uniform_int(static_cast<int>(i)));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

}  // namespace dunst
