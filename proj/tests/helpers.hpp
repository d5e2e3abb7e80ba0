#pragma once

// Shared randomized-construction utilities for the test suite.

#include "detsum/core.hpp"
#include "detsum/space.hpp"
#include "detsum/wave.hpp"

#include <Eigen/QR>

#include <cmath>
#include <vector>

namespace detsum {
namespace testhelp {

inline Matrix random_orthogonal(std::mt19937_64& rng, int n) {
  Matrix m = random_matrix(rng, n, n);
  Eigen::HouseholderQR<Matrix> qr(m);
  Matrix q = qr.householderQ();
  // Fix the gauge so Q is a deterministic function of m.
  Matrix r = qr.matrixQR().triangularView<Eigen::Upper>();
  for (int i = 0; i < n; ++i)
    if (r(i, i) < 0.0) q.col(i) *= -1.0;
  return q;
}

// A = U diag(s) V^T with exactly `deficiency` zero singular values; the
// nonzero ones are spread over [0.5, 2].
inline Matrix make_rank_deficient(std::mt19937_64& rng, int n, int deficiency) {
  Matrix u = random_orthogonal(rng, n);
  Matrix v = random_orthogonal(rng, n);
  Vector s = Vector::Zero(n);
  std::uniform_real_distribution<double> dist(0.5, 2.0);
  for (int i = 0; i < n - deficiency; ++i) s[i] = dist(rng);
  return u * s.asDiagonal() * v.transpose();
}

// Gram-Schmidt under the quadrature inner product.
inline std::vector<Orbital> orthonormal_orbitals(std::mt19937_64& rng, const ParticleSpace& sp,
                                                 int count) {
  std::vector<Orbital> out;
  while (static_cast<int>(out.size()) < count) {
    Orbital v = random_vector(rng, sp.Mtot);
    for (const Orbital& u : out) v -= inner(sp, u, v) * u;
    const double nn = std::sqrt(inner(sp, v, v));
    if (nn < 1e-6) continue;
    out.push_back(v / nn);
  }
  return out;
}

inline std::vector<Orbital> random_orbitals(std::mt19937_64& rng, const ParticleSpace& sp,
                                            int count) {
  std::vector<Orbital> out;
  out.reserve(count);
  for (int i = 0; i < count; ++i) out.push_back(random_vector(rng, sp.Mtot));
  return out;
}

inline ParticleSpace small_space(int pointsPerDim = 3, double spacing = 0.6) {
  ModelConfig cfg;
  cfg.dim = 1;
  cfg.pointsPerDim = pointsPerDim;
  cfg.spacing = spacing;
  ParticleSpace sp;
  OneBodyOp op;
  PoissonOp pop;
  build_grid_model(cfg, sp, op, pop);
  return sp;
}

// Component of `seed` orthogonal (in the quadrature inner product) to span(basis).
inline Orbital perp_component(const ParticleSpace& sp, const std::vector<Orbital>& basis,
                              const Orbital& seed) {
  Orbital v = seed;
  // Two rounds of classical Gram-Schmidt keep the residual orthogonal to
  // working precision even when the basis is ill-conditioned.
  for (int round = 0; round < 2; ++round) {
    std::vector<Orbital> ortho;
    for (const Orbital& b : basis) {
      Orbital u = b;
      for (const Orbital& w : ortho) u -= inner(sp, w, u) * w;
      const double nn = std::sqrt(inner(sp, u, u));
      if (nn > 1e-12) ortho.push_back(u / nn);
    }
    for (const Orbital& w : ortho) v -= inner(sp, w, v) * w;
  }
  return v;
}

// Bra orbitals realizing a prescribed overlap matrix against `ket`:
// bra_i = sum_j X(i,j) ket_j with X G = L0, G the ket Gram matrix.  When
// `addPerp` is set, components orthogonal to span(ket) are mixed in; they do
// not change the overlaps but keep the bra generic.
inline std::vector<Orbital> bra_with_overlap(std::mt19937_64& rng, const ParticleSpace& sp,
                                             const std::vector<Orbital>& ket, const Matrix& L0,
                                             bool addPerp = true) {
  const Matrix G = overlap_matrix(sp, ket, ket);
  const Matrix X = G.ldlt().solve(L0.transpose()).transpose();
  std::vector<Orbital> bra;
  bra.reserve(L0.rows());
  for (int i = 0; i < L0.rows(); ++i) {
    Orbital v = Orbital::Zero(sp.Mtot);
    for (int j = 0; j < static_cast<int>(ket.size()); ++j) v += X(i, j) * ket[j];
    if (addPerp) v += 0.3 * perp_component(sp, ket, random_vector(rng, sp.Mtot));
    bra.push_back(v);
  }
  return bra;
}

// Overlap matrix with exactly `deficiency` zero singular values, sized
// rows x cols (deficiency counted against min(rows, cols)).
inline Matrix rank_deficient_rect(std::mt19937_64& rng, int rows, int cols, int deficiency) {
  const int rank = std::min(rows, cols) - deficiency;
  std::uniform_real_distribution<double> dist(0.5, 2.0);
  Matrix a = random_matrix(rng, rows, rank);
  Matrix b = random_matrix(rng, rank, cols);
  Matrix out = Matrix::Zero(rows, cols);
  if (rank > 0) out = a * dist(rng) * b;
  return out;
}

}  // namespace testhelp
}  // namespace detsum
