// Exponential-sum approximation of 1/t and the separated N-particle
// resolvent (T - mu)^-1 built from it, one single-particle propagator per
// exponential term.

#ifndef DETSUM_GREENS_HPP
#define DETSUM_GREENS_HPP

#include "detsum/core.hpp"
#include "detsum/space.hpp"

#include <Eigen/Eigenvalues>

#include <cmath>
#include <numbers>
#include <sstream>
#include <stdexcept>
#include <utility>
#include <vector>

namespace detsum {

// Sum of positive exponentials approximating 1/t on [1, validUpper] with
// relative error at most eps.
struct ExpSum {
  std::vector<std::pair<double, double>> terms;  // (w_p, tau_p), both positive
  double eps = 0.0;
  double validUpper = 1.0;
};

inline double expsum_value(const ExpSum& es, double t) {
  double acc = 0.0;
  for (const auto& [w, tau] : es.terms) acc += w * std::exp(-tau * t);
  return acc;
}

// Worst relative error of the sum against 1/t over a 2000-point logarithmic
// grid on [1, R].
inline double expsum_certificate(const ExpSum& es, double R) {
  const int gridPoints = 2000;
  double worst = 0.0;
  for (int k = 0; k < gridPoints; ++k) {
    const double t = std::exp(std::log(R) * k / (gridPoints - 1));
    worst = std::max(worst, std::abs(1.0 - t * expsum_value(es, t)));
  }
  return worst;
}

// Trapezoidal discretization of 1/t = integral exp(-t e^x + x) dx.  The
// truncation window keeps both tails below eps/4 for all t in [1, R]; the
// step is shrunk until the certificate grid passes.  Term count is capped at
// 4 (ln 1/eps)^2, so loose tolerances over wide intervals are rejected
// rather than padded with terms.
inline ExpSum build_expsum(double eps, double R) {
  require(eps > 0.0 && eps < 1.0, "build_expsum: eps must lie in (0, 1)");
  require(R >= 1.0, "build_expsum: R must be at least 1");
  const double xHi = std::log(std::log(4.0 / eps));
  const double xLo = std::log(eps / (4.0 * R));
  const double logInv = std::log(1.0 / eps);
  const long cap = static_cast<long>(4.0 * logInv * logInv);
  double h = std::numbers::pi * std::numbers::pi / (logInv + 6.0);
  double bestErr = -1.0;
  long bestL = 0;
  for (int attempt = 0; attempt < 40; ++attempt, h *= 0.9) {
    const long L = static_cast<long>(std::ceil((xHi - xLo) / h)) + 1;
    if (L > cap) break;
    ExpSum es;
    es.eps = eps;
    es.validUpper = R;
    es.terms.reserve(L);
    for (long p = 0; p < L; ++p) {
      const double x = xLo + h * static_cast<double>(p);
      es.terms.emplace_back(h * std::exp(x), std::exp(x));
    }
    const double err = expsum_certificate(es, R);
    if (err <= eps) return es;
    bestErr = err;
    bestL = L;
  }
  std::ostringstream msg;
  msg << "build_expsum: no certified approximation with eps=" << eps << ", R=" << R
      << " under the term cap " << cap;
  if (bestL > 0) msg << " (closest attempt: L=" << bestL << ", error=" << bestErr << ")";
  throw std::runtime_error(msg.str());
}

// Separated resolvent (T - mu)^-1 = sum_p (prod over particle slots) F^p,
// with each F^p acting on one particle.  The prefactor c_p is split
// symmetrically across the N slots, so a single matrix per term serves
// every slot.
struct GreensRep {
  double mu = -1.0;
  std::vector<Matrix> Fmats;   // c_p^(1/N) Q exp(-(tau_p/-mu) Lambda) Q^T
  Vector perDirectionScale;    // the c_p^(1/N) factors folded into Fmats
};

inline GreensRep build_greens(const ExpSum& es, double mu, const ParticleSpace& sp,
                              const OneBodyOp& op, int nParticles) {
  require(mu < 0.0, "build_greens: mu must be negative");
  require(nParticles >= 1, "build_greens: particle count must be positive");
  require(op.Tmat.rows() == sp.Ms, "build_greens: kinetic matrix size mismatch");
  Eigen::SelfAdjointEigenSolver<Matrix> eig(op.Tmat);
  require(eig.info() == Eigen::Success, "build_greens: eigendecomposition failed");
  const double lamMax = eig.eigenvalues().maxCoeff();
  const double needed = (nParticles * lamMax - mu) / (-mu);
  if (needed > es.validUpper) {
    std::ostringstream msg;
    msg << "build_greens: shifted kinetic spectrum needs a certified interval with R >= "
        << needed << " but the exponential sum covers R = " << es.validUpper;
    throw std::invalid_argument(msg.str());
  }

  const long L = static_cast<long>(es.terms.size());
  GreensRep rep;
  rep.mu = mu;
  rep.Fmats.reserve(L);
  rep.perDirectionScale.resize(L);
  const Matrix& Q = eig.eigenvectors();
  const Vector& lam = eig.eigenvalues();
  for (long p = 0; p < L; ++p) {
    const auto& [w, tau] = es.terms[p];
    const double cp = (w / (-mu)) * std::exp(-tau);
    const double scale = std::pow(cp, 1.0 / nParticles);
    rep.perDirectionScale[p] = scale;
    Vector decay = (-(tau / (-mu)) * lam.array()).exp();
    rep.Fmats.push_back(scale * (Q * decay.asDiagonal() * Q.transpose()));
  }
  return rep;
}

// Spin-diagonal action of the p-th propagator on one orbital.
inline Orbital apply_F(const ParticleSpace& sp, const GreensRep& rep, int p, const Orbital& f) {
  require(p >= 0 && p < static_cast<int>(rep.Fmats.size()), "apply_F: term index out of range");
  require(static_cast<int>(f.size()) == sp.Mtot, "apply_F: orbital length mismatch");
  Orbital out(sp.Mtot);
  for (int s = 0; s < 2; ++s)
    out.segment(s * sp.Ms, sp.Ms) = rep.Fmats[p] * f.segment(s * sp.Ms, sp.Ms);
  return out;
}

}  // namespace detsum

#endif
