#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace equitab {

// splitmix64 finalizer. Used to derive decorrelated seed streams from one
// base seed; every source of randomness in the project is a pure function
// of (base seed, stream tag, index).
inline std::uint64_t mix_seed(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t tag) {
  return mix_seed(mix_seed(seed) ^ tag);
}

inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t tag,
                              std::uint64_t index) {
  return mix_seed(mix_seed(seed, tag) ^ mix_seed(index));
}

// Stream tags; fixed so runs are reproducible across code changes that add
// new streams.
namespace seed_tag {
constexpr std::uint64_t dims = 0x01;
constexpr std::uint64_t content = 0x02;
constexpr std::uint64_t relabel = 0x03;
constexpr std::uint64_t batch = 0x04;
constexpr std::uint64_t eval = 0x05;
constexpr std::uint64_t init = 0x06;
constexpr std::uint64_t split = 0x07;
constexpr std::uint64_t perm = 0x08;
constexpr std::uint64_t ensemble = 0x09;
constexpr std::uint64_t codebook = 0x0a;
constexpr std::uint64_t task = 0x0b;
}  // namespace seed_tag

struct Rng {
  std::mt19937_64 eng;

  explicit Rng(std::uint64_t seed) : eng(mix_seed(seed)) {}

  double uniform() {
    return std::uniform_real_distribution<double>(0.0, 1.0)(eng);
  }

  double uniform(double lo, double hi) {
    return std::uniform_real_distribution<double>(lo, hi)(eng);
  }

  double normal(double mean = 0.0, double stddev = 1.0) {
    return std::normal_distribution<double>(mean, stddev)(eng);
  }

  // Standard Gumbel(0,1) via inverse transform.
  double gumbel() {
    double u = uniform();
    u = std::min(std::max(u, 1e-300), 1.0 - 1e-16);
    return -std::log(-std::log(u));
  }

  // Inclusive bounds.
  long uniform_int(long lo, long hi) {
    return std::uniform_int_distribution<long>(lo, hi)(eng);
  }

  template <class T>
  void shuffle(std::vector<T>& v) {
    std::shuffle(v.begin(), v.end(), eng);
  }

  // Uniform random permutation of {0..n-1} (Fisher-Yates via std::shuffle).
  std::vector<int> permutation(int n) {
    std::vector<int> p(n);
    for (int i = 0; i < n; ++i) p[i] = i;
    shuffle(p);
    return p;
  }
};

}  // namespace equitab
