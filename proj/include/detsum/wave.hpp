#pragma once

// Separated wavefunctions (sums of Slater products) and the overlap /
// coincidence machinery behind every antisymmetric inner product: the
// Lowdin matrix L, its biorthogonal partner list Theta, and the bordered
// matrix E with its distinguished unit vector d.

#include "detsum/core.hpp"
#include "detsum/linalg.hpp"
#include "detsum/space.hpp"

#include <cstdio>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

namespace detsum {

struct SlaterTerm {
  double s = 1.0;                 // scalar coefficient carried outside the product
  std::vector<Orbital> orbitals;  // N one-particle factors
};

struct SeparatedWavefunction {
  std::vector<SlaterTerm> terms;

  int r() const { return static_cast<int>(terms.size()); }
  int N() const { return terms.empty() ? 0 : static_cast<int>(terms[0].orbitals.size()); }
};

inline void validate(const SeparatedWavefunction& psi) {
  require(!psi.terms.empty(), "wavefunction: needs at least one term");
  const int n = psi.N();
  for (const SlaterTerm& t : psi.terms)
    require(static_cast<int>(t.orbitals.size()) == n,
            "wavefunction: all terms must share the particle count");
}

// L(i, j) = <bra_i, ket_j> under the quadrature inner product.
inline Matrix overlap_matrix(const ParticleSpace& sp, const std::vector<Orbital>& bra,
                             const std::vector<Orbital>& ket) {
  require(bra.size() == ket.size(), "overlap_matrix: count mismatch");
  const int n = static_cast<int>(bra.size());
  Matrix L(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) L(i, j) = inner(sp, bra[i], ket[j]);
  return L;
}

// Determinant of the overlap matrix: the antisymmetric inner product of two
// Slater products (with the global factorial factor dropped).
inline double lowdin_det(const ParticleSpace& sp, const std::vector<Orbital>& bra,
                         const std::vector<Orbital>& ket) {
  return overlap_matrix(sp, bra, ket).determinant();
}

struct CoincidenceData {
  std::vector<Orbital> theta;  // Theta = (L inverse or its modified form) * bra
  PseudoBundle Lbundle;
  double detFactor = 1.0;  // |L| when nonsingular, reciprocal modified det otherwise
};

// Biorthogonalizes the bra list against the ket list: theta_i = sum_j
// modinv(i,j) bra_j, so <theta_i, ket_j> = delta_ij up to the nullspace.
inline CoincidenceData max_coincidence(const ParticleSpace& sp, const std::vector<Orbital>& bra,
                                       const std::vector<Orbital>& ket, double etaRel = 1e-10) {
  CoincidenceData out;
  Matrix L = overlap_matrix(sp, bra, ket);
  out.Lbundle = compute_pseudo(L, etaRel);
  out.detFactor = pseudo_det(out.Lbundle);
  const int n = static_cast<int>(bra.size());
  out.theta.assign(n, Orbital::Zero(sp.Mtot));
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      if (out.Lbundle.modinv(i, j) != 0.0) out.theta[i] += out.Lbundle.modinv(i, j) * bra[j];
  return out;
}

struct EData {
  Matrix E;  // first row d^T, rows 2..N the bra-tail overlaps
  Vector d;  // unit vector orthogonal to the tail rows
  PseudoBundle Ebundle;
};

// Borders the (N-1) x N tail of bra/ket overlaps with the unit vector d
// orthogonal to all tail rows (smallest-singular-direction, deterministic
// sign), giving a square matrix with E d = e_1.
inline EData build_E(const ParticleSpace& sp, const std::vector<Orbital>& braTail,
                     const std::vector<Orbital>& ket, double etaRel = 1e-10) {
  const int n = static_cast<int>(ket.size());
  require(static_cast<int>(braTail.size()) == n - 1, "build_E: tail must have N-1 orbitals");
  EData out;
  if (n == 1) {
    out.d = Vector::Ones(1);
    out.E = Matrix::Ones(1, 1);
    out.Ebundle = compute_pseudo(out.E, etaRel);
    return out;
  }
  Matrix tail(n - 1, n);
  for (int i = 0; i < n - 1; ++i)
    for (int j = 0; j < n; ++j) tail(i, j) = inner(sp, braTail[i], ket[j]);
  Eigen::JacobiSVD<Matrix> svd(tail, Eigen::ComputeFullV);
  out.d = svd.matrixV().col(n - 1);  // smallest singular direction
  fix_vector_sign(out.d);
  out.E.resize(n, n);
  out.E.row(0) = out.d.transpose();
  out.E.bottomRows(n - 1) = tail;
  out.Ebundle = compute_pseudo(out.E, etaRel);
  return out;
}

// sqrt of the antisymmetric pseudo norm squared, sum_{l,m} s_l s_m |L^{lm}|.
inline double norm_A(const ParticleSpace& sp, const SeparatedWavefunction& psi) {
  validate(psi);
  double acc = 0.0;
  for (const SlaterTerm& tl : psi.terms)
    for (const SlaterTerm& tm : psi.terms)
      acc += tl.s * tm.s * lowdin_det(sp, tl.orbitals, tm.orbitals);
  if (acc < -1e-10)
    throw std::runtime_error("norm_A: pseudo norm squared is negative");
  return std::sqrt(std::max(acc, 0.0));
}

// --- dump format -----------------------------------------------------------
// Header `detsum-wf v1 N=<N> r=<r> M=<Mtot>`, then per term a line
// `s=<scalar>` followed by N lines of Mtot values. 17 significant digits
// round-trip doubles exactly.

inline void write_wavefunction(std::ostream& os, const SeparatedWavefunction& psi, int Mtot) {
  validate(psi);
  char buf[40];
  os << "detsum-wf v1 N=" << psi.N() << " r=" << psi.r() << " M=" << Mtot << "\n";
  for (const SlaterTerm& t : psi.terms) {
    std::snprintf(buf, sizeof buf, "%.17g", t.s);
    os << "s=" << buf << "\n";
    for (const Orbital& phi : t.orbitals) {
      require(static_cast<int>(phi.size()) == Mtot, "write_wavefunction: orbital length mismatch");
      for (int g = 0; g < Mtot; ++g) {
        std::snprintf(buf, sizeof buf, "%.17g", phi[g]);
        os << (g ? " " : "") << buf;
      }
      os << "\n";
    }
  }
}

inline SeparatedWavefunction read_wavefunction(std::istream& is) {
  std::string line;
  require(static_cast<bool>(std::getline(is, line)), "wavefunction read: missing header");
  int n = 0, r = 0, mtot = 0;
  require(std::sscanf(line.c_str(), "detsum-wf v1 N=%d r=%d M=%d", &n, &r, &mtot) == 3,
          "wavefunction read: bad header: " + line);
  require(n >= 1 && r >= 1 && mtot >= 1, "wavefunction read: bad header counts");
  SeparatedWavefunction psi;
  psi.terms.resize(r);
  for (int l = 0; l < r; ++l) {
    require(static_cast<bool>(std::getline(is, line)), "wavefunction read: missing term scalar");
    double s = 0.0;
    require(std::sscanf(line.c_str(), "s=%lf", &s) == 1,
            "wavefunction read: bad scalar line: " + line);
    psi.terms[l].s = s;
    psi.terms[l].orbitals.assign(n, Orbital(mtot));
    for (int i = 0; i < n; ++i) {
      require(static_cast<bool>(std::getline(is, line)), "wavefunction read: missing orbital row");
      std::istringstream row(line);
      for (int g = 0; g < mtot; ++g)
        require(static_cast<bool>(row >> psi.terms[l].orbitals[i][g]),
                "wavefunction read: short orbital row");
      double extra;
      require(!(row >> extra), "wavefunction read: overlong orbital row");
    }
  }
  return psi;
}

}  // namespace detsum
