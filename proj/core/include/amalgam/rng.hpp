#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace amalgam {

/// splitmix64 mixing step: cheap, well distributed, and stable across
/// platforms. Used to derive independent child seeds from a root seed so
/// that unrelated random streams never alias.
inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d649bb133111ebull;
  return x ^ (x >> 31);
}

/// Derives a child seed from a root seed and a stream label. Equal inputs
/// give equal outputs on every platform, which is what makes runs
/// reproducible byte-for-byte.
inline uint64_t derive_seed(uint64_t root, const std::string& stream, uint64_t index = 0) {
  uint64_t h = splitmix64(root);
  for (unsigned char c : stream) h = splitmix64(h ^ c);
  return splitmix64(h ^ index);
}

/// Deterministic random stream. Thin wrapper over mt19937_64 with the
/// handful of draw shapes the toolkit needs.
class Rng {
 public:
  explicit Rng(uint64_t seed) : gen_(seed) {}

  uint64_t next_u64() { return gen_(); }

  /// Uniform in [lo, hi).
  double uniform(double lo = 0.0, double hi = 1.0) {
    return std::uniform_real_distribution<double>(lo, hi)(gen_);
  }

  /// Standard normal times `std`, shifted by `mean`.
  double normal(double mean = 0.0, double std = 1.0) {
    return std::normal_distribution<double>(mean, std)(gen_);
  }

  /// Uniform integer in [lo, hi] inclusive.
  int64_t uniform_int(int64_t lo, int64_t hi) {
    return std::uniform_int_distribution<int64_t>(lo, hi)(gen_);
  }

  std::vector<double> normal_vec(size_t n, double mean = 0.0, double std = 1.0) {
    std::vector<double> out(n);
    for (auto& v : out) v = normal(mean, std);
    return out;
  }

  std::vector<double> uniform_vec(size_t n, double lo = 0.0, double hi = 1.0) {
    std::vector<double> out(n);
    for (auto& v : out) v = uniform(lo, hi);
    return out;
  }

  std::mt19937_64& engine() { return gen_; }

 private:
  std::mt19937_64 gen_;
};

}  // namespace amalgam
