#pragma once

#include <cmath>
#include <cstdint>
#include <random>

#include "slm/types.hpp"

namespace slm {

using Rng = std::mt19937_64;

/// Independent stream for (master seed, stream index). Replications and cells
/// derive their generators through this so results never depend on scheduling.
inline Rng make_stream(std::uint64_t master, std::uint64_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(master), static_cast<std::uint32_t>(master >> 32),
                    static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32),
                    0x5eedu};
  return Rng(seq);
}

/// Stable 64-bit mix of two words (splitmix64 finaliser), used to build nested stream ids.
inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline double standard_normal(Rng& rng) {
  std::normal_distribution<double> dist(0.0, 1.0);
  return dist(rng);
}

inline double uniform01(Rng& rng) {
  std::uniform_real_distribution<double> dist(0.0, 1.0);
  return dist(rng);
}

inline Vector normal_vector(Rng& rng, Index n) {
  Vector v(n);
  for (Index i = 0; i < n; ++i) v[i] = standard_normal(rng);
  return v;
}

inline Matrix normal_matrix(Rng& rng, Index rows, Index cols) {
  Matrix m(rows, cols);
  for (Index j = 0; j < cols; ++j)
    for (Index i = 0; i < rows; ++i) m(i, j) = standard_normal(rng);
  return m;
}

/// Uniformly distributed unit vector.
inline Vector uniform_direction(Rng& rng, Index n) {
  Vector v = normal_vector(rng, n);
  double norm = v.norm();
  while (norm == 0.0) {
    v = normal_vector(rng, n);
    norm = v.norm();
  }
  return v / norm;
}

}  // namespace slm
