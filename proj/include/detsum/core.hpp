#pragma once

// Shared aliases and small helpers used across the library.

#include <Eigen/Dense>

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace detsum {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

// One-particle function sampled on the composite grid-times-spin index.
using Orbital = Eigen::VectorXd;

inline void require(bool ok, const std::string& what) {
  if (!ok) throw std::invalid_argument(what);
}

// Flips v (and its partner u) so the largest-magnitude entry of v is positive.
// Keeps reported singular/null vectors reproducible across runs.
inline void fix_pair_sign(Vector& u, Vector& v) {
  int imax = 0;
  v.cwiseAbs().maxCoeff(&imax);
  if (v[imax] < 0.0) {
    v = -v;
    u = -u;
  }
}

inline void fix_vector_sign(Vector& v) {
  int imax = 0;
  v.cwiseAbs().maxCoeff(&imax);
  if (v[imax] < 0.0) v = -v;
}

// Deterministic generator seeded per purpose; streams stay decoupled when
// callers derive sub-seeds instead of sharing one engine.
inline std::mt19937_64 make_rng(std::uint64_t seed) { return std::mt19937_64(seed); }

inline Vector random_vector(std::mt19937_64& rng, int n, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  Vector v(n);
  for (int i = 0; i < n; ++i) v[i] = dist(rng);
  return v;
}

inline Matrix random_matrix(std::mt19937_64& rng, int rows, int cols) {
  std::uniform_real_distribution<double> dist(-1.0, 1.0);
  Matrix m(rows, cols);
  for (int j = 0; j < cols; ++j)
    for (int i = 0; i < rows; ++i) m(i, j) = dist(rng);
  return m;
}

}  // namespace detsum
