#pragma once

// Brute-force reference implementations used by the test suite. Everything
// here favors transparency over speed: dense permanents over permutations,
// dense eigensolves, regularized least squares. Nothing in this header is
// used by the production code paths.

#include "detsum/core.hpp"
#include "detsum/space.hpp"
#include "detsum/wave.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

namespace detsum {
namespace oracle {

// Regularized pseudo-inverse (A^T A + lambda I)^{-1} A^T. For matrices whose
// nonzero singular values sit far above sqrt(lambda), this agrees with the
// thresholded SVD pseudo-inverse to high accuracy while sharing none of its
// implementation.
inline Matrix tikhonov_pinv(const Matrix& A, double lambda = 1e-14) {
  const int n = static_cast<int>(A.cols());
  Matrix lhs = A.transpose() * A + lambda * Matrix::Identity(n, n);
  return lhs.ldlt().solve(A.transpose());
}

// --- dense N-particle tensors ----------------------------------------------
// A tensor is a flat vector of length Mtot^N indexed by the gamma tuple with
// the first particle slowest. Small systems only.

inline long tensor_size(const ParticleSpace& sp, int nParticles) {
  long size = 1;
  for (int i = 0; i < nParticles; ++i) {
    size *= sp.Mtot;
    require(size <= 1000000, "oracle: dense tensor too large");
  }
  return size;
}

inline void decode_index(long t, int nParticles, int Mtot, std::vector<int>& gamma) {
  gamma.resize(nParticles);
  for (int i = nParticles - 1; i >= 0; --i) {
    gamma[i] = static_cast<int>(t % Mtot);
    t /= Mtot;
  }
}

inline int permutation_sign(const std::vector<int>& perm) {
  int inversions = 0;
  for (size_t i = 0; i < perm.size(); ++i)
    for (size_t j = i + 1; j < perm.size(); ++j)
      if (perm[i] > perm[j]) ++inversions;
  return (inversions % 2 == 0) ? 1 : -1;
}

inline Vector dense_term_tensor(const ParticleSpace& sp, const SlaterTerm& term) {
  const int n = static_cast<int>(term.orbitals.size());
  const long size = tensor_size(sp, n);
  Vector out(size);
  std::vector<int> gamma;
  for (long t = 0; t < size; ++t) {
    decode_index(t, n, sp.Mtot, gamma);
    double val = term.s;
    for (int i = 0; i < n; ++i) val *= term.orbitals[i][gamma[i]];
    out[t] = val;
  }
  return out;
}

inline Vector dense_wavefunction_tensor(const ParticleSpace& sp,
                                        const SeparatedWavefunction& psi) {
  validate(psi);
  Vector out = Vector::Zero(tensor_size(sp, psi.N()));
  for (const SlaterTerm& term : psi.terms) out += dense_term_tensor(sp, term);
  return out;
}

// Sum over all particle permutations with signs; no factorial normalization,
// matching the convention used throughout.
inline Vector dense_antisymmetrize(const ParticleSpace& sp, const Vector& x, int nParticles) {
  const long size = tensor_size(sp, nParticles);
  require(x.size() == size, "dense_antisymmetrize: tensor size mismatch");
  Vector out = Vector::Zero(size);
  std::vector<int> perm(nParticles);
  std::iota(perm.begin(), perm.end(), 0);
  std::vector<int> gamma, permuted(nParticles);
  do {
    const int sign = permutation_sign(perm);
    for (long t = 0; t < size; ++t) {
      decode_index(t, nParticles, sp.Mtot, gamma);
      long src = 0;
      for (int i = 0; i < nParticles; ++i) permuted[i] = gamma[perm[i]];
      for (int i = 0; i < nParticles; ++i) src = src * sp.Mtot + permuted[i];
      out[t] += sign * x[src];
    }
  } while (std::next_permutation(perm.begin(), perm.end()));
  return out;
}

// Quadrature inner product of two dense tensors.
inline double dense_inner_w(const ParticleSpace& sp, const Vector& x, const Vector& y,
                            int nParticles) {
  const long size = tensor_size(sp, nParticles);
  require(x.size() == size && y.size() == size, "dense_inner_w: tensor size mismatch");
  double acc = 0.0;
  std::vector<int> gamma;
  for (long t = 0; t < size; ++t) {
    decode_index(t, nParticles, sp.Mtot, gamma);
    double w = 1.0;
    for (int i = 0; i < nParticles; ++i) w *= sp.weights[sp.spatial_of(gamma[i])];
    acc += w * x[t] * y[t];
  }
  return acc;
}

// The antisymmetric pseudo inner product, evaluated by brute force with the
// antisymmetrizer expanded on one side.
inline double dense_ip_asym(const ParticleSpace& sp, const SeparatedWavefunction& f,
                            const SeparatedWavefunction& g) {
  require(f.N() == g.N(), "dense_ip_asym: particle count mismatch");
  Vector ft = dense_antisymmetrize(sp, dense_wavefunction_tensor(sp, f), f.N());
  return dense_inner_w(sp, ft, dense_wavefunction_tensor(sp, g), f.N());
}

// --- dense operator applications --------------------------------------------

// The composite-index one-body matrix: spin-diagonal kinetic plus potential.
inline Matrix dense_one_body_matrix(const ParticleSpace& sp, const OneBodyOp& op) {
  Matrix tv = Matrix::Zero(sp.Mtot, sp.Mtot);
  Matrix block = op.Vdiag.asDiagonal();
  if (op.Tmat.size() != 0) block += op.Tmat;
  tv.block(0, 0, sp.Ms, sp.Ms) = block;
  tv.block(sp.Ms, sp.Ms, sp.Ms, sp.Ms) = block;
  return tv;
}

// Sum over particles of the one-body operator applied in each slot.
inline Vector dense_apply_TV(const ParticleSpace& sp, const OneBodyOp& op, const Vector& x,
                             int nParticles) {
  const long size = tensor_size(sp, nParticles);
  require(x.size() == size, "dense_apply_TV: tensor size mismatch");
  Matrix tv = dense_one_body_matrix(sp, op);
  Vector out = Vector::Zero(size);
  std::vector<int> gamma;
  for (int slot = 0; slot < nParticles; ++slot) {
    long stride = 1;
    for (int i = slot + 1; i < nParticles; ++i) stride *= sp.Mtot;
    for (long t = 0; t < size; ++t) {
      decode_index(t, nParticles, sp.Mtot, gamma);
      const long base = t - gamma[slot] * stride;
      double acc = 0.0;
      for (int gp = 0; gp < sp.Mtot; ++gp) {
        const double coeff = tv(gamma[slot], gp);
        if (coeff != 0.0) acc += coeff * x[base + gp * stride];
      }
      out[t] += acc;
    }
  }
  return out;
}

// Pairwise operator: pointwise multiplication by (1/2) sum_{i != j} P(r_i, r_j).
inline Vector dense_apply_W(const ParticleSpace& sp, const PoissonOp& pop, const Vector& x,
                            int nParticles) {
  const long size = tensor_size(sp, nParticles);
  require(x.size() == size, "dense_apply_W: tensor size mismatch");
  Vector out(size);
  std::vector<int> gamma;
  for (long t = 0; t < size; ++t) {
    decode_index(t, nParticles, sp.Mtot, gamma);
    double pair = 0.0;
    for (int i = 0; i < nParticles; ++i)
      for (int j = 0; j < nParticles; ++j)
        if (i != j) pair += pop.Pmat(sp.spatial_of(gamma[i]), sp.spatial_of(gamma[j]));
    out[t] = 0.5 * pair * x[t];
  }
  return out;
}

inline Vector dense_apply_H(const ParticleSpace& sp, const OneBodyOp& op, const PoissonOp& pop,
                            const Vector& x, int nParticles) {
  return dense_apply_TV(sp, op, x, nParticles) + dense_apply_W(sp, pop, x, nParticles);
}

// Contracts a dense tensor y against delta(gamma - gamma_1) * tail-product:
// R(gamma) = sum over the remaining slots of prod weights * prod tail * y.
// With y = antisymmetrize(Op ket-tensor) this evaluates the delta-localized
// antisymmetric products pointwise.
inline Orbital dense_delta_contract(const ParticleSpace& sp, const std::vector<Orbital>& tail,
                                    const Vector& y) {
  const int n = static_cast<int>(tail.size()) + 1;
  const long size = tensor_size(sp, n);
  require(y.size() == size, "dense_delta_contract: tensor size mismatch");
  Orbital out = Orbital::Zero(sp.Mtot);
  std::vector<int> gamma;
  for (long t = 0; t < size; ++t) {
    decode_index(t, n, sp.Mtot, gamma);
    double factor = 1.0;
    for (int i = 1; i < n; ++i)
      factor *= sp.weights[sp.spatial_of(gamma[i])] * tail[i - 1][gamma[i]];
    out[gamma[0]] += factor * y[t];
  }
  return out;
}

// Entrywise kernel of the normal-equation block for one (l, l') pair of
// off-direction orbital lists: K(gamma, gamma') is the antisymmetric product
// of delta-plus-tail terms, assembled column by column from dense tensors.
// Kernel action is sum over gamma' of w(gamma') K(gamma, gamma') x(gamma').
inline Matrix dense_normal_kernel(const ParticleSpace& sp, const std::vector<Orbital>& tailL,
                                  const std::vector<Orbital>& tailR) {
  require(tailL.size() == tailR.size(), "dense_normal_kernel: tail size mismatch");
  const int n = static_cast<int>(tailL.size()) + 1;
  Matrix K(sp.Mtot, sp.Mtot);
  for (int gp = 0; gp < sp.Mtot; ++gp) {
    std::vector<Orbital> ket;
    ket.push_back(delta_vector(sp, gp));
    for (const Orbital& t : tailR) ket.push_back(t);
    Vector y = dense_antisymmetrize(sp, dense_term_tensor(sp, SlaterTerm{1.0, ket}), n);
    K.col(gp) = dense_delta_contract(sp, tailL, y);
  }
  return K;
}

// Enumerates strictly increasing gamma-index tuples (the occupation basis of
// the antisymmetric subspace).
inline std::vector<std::vector<int>> increasing_tuples(int mtot, int nParticles) {
  std::vector<std::vector<int>> out;
  std::vector<int> cur(nParticles);
  for (int i = 0; i < nParticles; ++i) cur[i] = i;
  if (nParticles > mtot) return out;
  while (true) {
    out.push_back(cur);
    int i = nParticles - 1;
    while (i >= 0 && cur[i] == mtot - nParticles + i) --i;
    if (i < 0) break;
    ++cur[i];
    for (int j = i + 1; j < nParticles; ++j) cur[j] = cur[j - 1] + 1;
  }
  return out;
}

struct GroundState {
  double energy = 0.0;
  Vector state;  // full product-grid tensor, unit weighted norm
};

// Dense ground state of the N-particle Hamiltonian on the antisymmetric
// subspace. Basis states are antisymmetrized products of grid deltas over
// strictly increasing index tuples, normalized in the weighted inner
// product; the Hamiltonian is applied literally on the full tensor.
inline GroundState exact_ground(const ParticleSpace& sp, const OneBodyOp& op, const PoissonOp& pop,
                                int nParticles) {
  const long size = tensor_size(sp, nParticles);
  auto tuples = increasing_tuples(sp.Mtot, nParticles);
  const long dim = static_cast<long>(tuples.size());
  require(dim >= 1, "exact_ground: empty antisymmetric basis");
  const double factN = std::tgamma(static_cast<double>(nParticles) + 1.0);

  // Normalized basis tensor for one occupation tuple, built sparsely.
  auto basis_tensor = [&](const std::vector<int>& tup) {
    Vector x = Vector::Zero(size);
    double wprod = 1.0;
    for (int g : tup) wprod *= sp.weights[sp.spatial_of(g)];
    const double amp = std::sqrt(wprod / factN);
    std::vector<int> perm(nParticles);
    std::iota(perm.begin(), perm.end(), 0);
    do {
      long t = 0;
      for (int i = 0; i < nParticles; ++i) t = t * sp.Mtot + tup[perm[i]];
      double entry = amp * permutation_sign(perm);
      for (int g : tup) entry /= sp.weights[sp.spatial_of(g)];
      x[t] = entry;
    } while (std::next_permutation(perm.begin(), perm.end()));
    return x;
  };

  Matrix H(dim, dim);
  for (long j = 0; j < dim; ++j) {
    Vector hj = dense_apply_H(sp, op, pop, basis_tensor(tuples[j]), nParticles);
    for (long i = 0; i < dim; ++i) {
      // The bra basis tensor has n! nonzero entries; contract sparsely.
      const std::vector<int>& tup = tuples[i];
      double wprod = 1.0;
      for (int g : tup) wprod *= sp.weights[sp.spatial_of(g)];
      const double amp = std::sqrt(wprod / factN);
      std::vector<int> perm(nParticles);
      std::iota(perm.begin(), perm.end(), 0);
      double acc = 0.0;
      do {
        long t = 0;
        for (int ii = 0; ii < nParticles; ++ii) t = t * sp.Mtot + tup[perm[ii]];
        acc += permutation_sign(perm) * amp * hj[t];
      } while (std::next_permutation(perm.begin(), perm.end()));
      H(i, j) = acc;
    }
  }
  H = 0.5 * (H + H.transpose().eval());  // symmetrize away roundoff
  Eigen::SelfAdjointEigenSolver<Matrix> eig(H);
  require(eig.info() == Eigen::Success, "exact_ground: eigensolve failed");
  GroundState gs;
  long best = 0;
  eig.eigenvalues().minCoeff(&best);
  gs.energy = eig.eigenvalues()[best];
  gs.state = Vector::Zero(size);
  for (long j = 0; j < dim; ++j) gs.state += eig.eigenvectors()(j, best) * basis_tensor(tuples[j]);
  return gs;
}

// Dense n-particle resolvent: solves (sum over slots of A_i - mu I) y = x on
// the full product grid, where every slot carries the same single-particle
// matrix `single` (composite gamma index, so Mtot x Mtot). Memory grows with
// the square of the tensor size; strictly a small-problem reference.
inline Vector dense_resolvent_apply(const ParticleSpace& sp, const Matrix& single, double mu,
                                    const Vector& x, int nParticles) {
  require(single.rows() == sp.Mtot && single.cols() == sp.Mtot,
          "dense_resolvent_apply: single-particle matrix size mismatch");
  const long size = tensor_size(sp, nParticles);
  require(size <= 5000, "dense_resolvent_apply: tensor too large for a dense solve");
  require(x.size() == size, "dense_resolvent_apply: tensor size mismatch");
  Matrix H = -mu * Matrix::Identity(size, size);
  std::vector<int> gamma;
  for (long t = 0; t < size; ++t) {
    decode_index(t, nParticles, sp.Mtot, gamma);
    long stride = 1;
    for (int i = nParticles - 1; i >= 0; --i) {
      for (int g = 0; g < sp.Mtot; ++g)
        H(t + (g - gamma[i]) * stride, t) += single(g, gamma[i]);
      stride *= sp.Mtot;
    }
  }
  return H.partialPivLu().solve(x);
}

// Dense least-squares objective of one fitting pass: the pseudo-norm of
// psiTilde - (-(T - mu)^-1 (V + W) psi), everything evaluated on the full
// tensor with the exact resolvent.
inline double fit_residual(const ParticleSpace& sp, const OneBodyOp& op, const PoissonOp& pop,
                           const SeparatedWavefunction& psiTilde, const SeparatedWavefunction& psi,
                           double mu) {
  require(psiTilde.N() == psi.N(), "fit_residual: particle count mismatch");
  const int n = psi.N();
  OneBodyOp vOnly;
  vOnly.Vdiag = op.Vdiag;
  OneBodyOp kinetic;
  kinetic.Tmat = op.Tmat;
  kinetic.Vdiag = Vector::Zero(sp.Ms);
  const Matrix single = dense_one_body_matrix(sp, kinetic);
  Vector psiT = dense_wavefunction_tensor(sp, psi);
  Vector vw = dense_apply_TV(sp, vOnly, psiT, n) + dense_apply_W(sp, pop, psiT, n);
  Vector target = -dense_resolvent_apply(sp, single, mu, vw, n);
  Vector resid = dense_wavefunction_tensor(sp, psiTilde) - target;
  const double sq = dense_inner_w(sp, dense_antisymmetrize(sp, resid, n), resid, n);
  return std::sqrt(std::max(0.0, sq));
}

}  // namespace oracle
}  // namespace detsum
