#pragma once

// Dense low-rank determinant and modified pseudo-inverse machinery:
// perturbed-identity determinants, thresholded SVD bundles, and the
// five-case rank-one update rules for (pinv, nullproj, detMod).

#include "detsum/core.hpp"

#include <Eigen/SVD>

#include <cmath>
#include <utility>
#include <vector>

namespace detsum {

// det(I_N + sum_q u_q v_q^T) computed as the Q x Q determinant det(I_Q + V^T U).
inline double det_perturbed_identity(const Matrix& U, const Matrix& V) {
  require(U.rows() == V.rows() && U.cols() == V.cols(),
          "det_perturbed_identity: U and V must have identical shapes");
  const int q = static_cast<int>(U.cols());
  if (q == 0) return 1.0;
  Matrix small = Matrix::Identity(q, q) + V.transpose() * U;
  return small.determinant();
}

struct SvdBundle {
  Matrix U;        // left singular vectors, columns
  Vector S;        // singular values, non-increasing
  Matrix V;        // right singular vectors, columns
  double etaAbs;   // absolute threshold used to count the numerical nullspace
};

// Full SVD with the deterministic sign convention: the largest-magnitude
// entry of each right singular vector is positive (partner column flipped
// in lockstep, so U S V^T is unchanged).
inline SvdBundle svd_decompose(const Matrix& A, double etaRel = 1e-10) {
  require(A.rows() == A.cols(), "svd_decompose: matrix must be square");
  require(etaRel > 0.0, "svd_decompose: etaRel must be positive");
  Eigen::JacobiSVD<Matrix> svd(A, Eigen::ComputeFullU | Eigen::ComputeFullV);
  SvdBundle b;
  b.U = svd.matrixU();
  b.S = svd.singularValues();
  b.V = svd.matrixV();
  const int n = static_cast<int>(A.rows());
  for (int i = 0; i < n; ++i) {
    Vector u = b.U.col(i), v = b.V.col(i);
    fix_pair_sign(u, v);
    b.U.col(i) = u;
    b.V.col(i) = v;
  }
  b.etaAbs = (n > 0) ? etaRel * b.S[0] : 0.0;
  return b;
}

// Pseudo-inverse bundle: pinv keeps inverted directions, nullproj carries the
// numerical nullspace pairs, modinv = pinv + nullproj stays invertible with
// det(modinv) = detMod != 0.
struct PseudoBundle {
  Matrix pinv;
  Matrix nullproj;
  Matrix modinv;
  double detMod = 1.0;
  int rankDef = 0;
  std::vector<std::pair<Vector, Vector>> nullPairs;  // (u_i, v_i), nullproj = sum v_i u_i^T
  double etaAbs = 0.0;
  Vector singvals;  // fresh decompositions only; empty after incremental updates
};

namespace detail {

// Factors a (near-)partial-isometry P = sum v_i u_i^T of rank q into
// orthonormal pairs via a small SVD; the pairs reproduce P exactly up to
// rounding for any q.
inline std::vector<std::pair<Vector, Vector>> factor_nullproj(const Matrix& P, int q) {
  std::vector<std::pair<Vector, Vector>> pairs;
  if (q == 0) return pairs;
  Eigen::JacobiSVD<Matrix> svd(P, Eigen::ComputeFullU | Eigen::ComputeFullV);
  pairs.reserve(q);
  for (int i = 0; i < q; ++i) {
    Vector v = svd.matrixU().col(i);   // output side of P
    Vector u = svd.matrixV().col(i);   // input side of P
    u *= svd.singularValues()[i];      // absorb the ~1 singular value
    fix_pair_sign(u, v);
    pairs.emplace_back(u, v);
  }
  return pairs;
}

}  // namespace detail

inline PseudoBundle compute_pseudo(const Matrix& A, double etaRel = 1e-10) {
  SvdBundle s = svd_decompose(A, etaRel);
  const int n = static_cast<int>(A.rows());
  PseudoBundle p;
  p.etaAbs = s.etaAbs;
  p.singvals = s.S;
  p.pinv = Matrix::Zero(n, n);
  p.nullproj = Matrix::Zero(n, n);
  double detU = (n > 0 && s.U.determinant() < 0.0) ? -1.0 : 1.0;
  double detV = (n > 0 && s.V.determinant() < 0.0) ? -1.0 : 1.0;
  double prodKept = 1.0;
  for (int i = 0; i < n; ++i) {
    if (s.S[i] > s.etaAbs) {
      p.pinv += (1.0 / s.S[i]) * s.V.col(i) * s.U.col(i).transpose();
      prodKept *= s.S[i];
    } else {
      p.nullproj += s.V.col(i) * s.U.col(i).transpose();
      p.nullPairs.emplace_back(s.U.col(i), s.V.col(i));
      ++p.rankDef;
    }
  }
  p.modinv = p.pinv + p.nullproj;
  p.detMod = 1.0 / (detU * detV * prodKept);
  return p;
}

// Orthonormal pairs spanning nullproj. Callers only ever need small
// deficiencies; larger ones are short-circuited to zero upstream.
inline const std::vector<std::pair<Vector, Vector>>& nullspace_pairs(const PseudoBundle& p) {
  if (p.rankDef > 3)
    throw std::domain_error("nullspace_pairs: deficiency above 3 unsupported");
  return p.nullPairs;
}

// Rank-one update result; corrections lists the outer-product terms with
// modinv_new = modinv_old + sum L_i R_i^T, consumed by the reuse fast path.
struct UpdateResult {
  PseudoBundle bundle;
  std::vector<std::pair<Vector, Vector>> corrections;
};

// Updates the bundle of A to the bundle of A + b c^T following the five-case
// classification on (|lambda|, ||f||, ||g||) with the base bundle's etaAbs.
inline UpdateResult rank_one_update(const PseudoBundle& P, const Matrix& A,
                                    const Vector& b, const Vector& c) {
  const int n = static_cast<int>(A.rows());
  require(A.rows() == A.cols() && b.size() == n && c.size() == n,
          "rank_one_update: shape mismatch");
  {
    const double scale = A.norm() + b.norm() * c.norm();
    if ((A * P.pinv * A - A).norm() > 1e-6 * (scale + 1.0) ||
        (A * P.nullproj).norm() > 1e-6 * (scale + 1.0))
      throw std::invalid_argument("rank_one_update: bundle inconsistent with matrix");
  }

  const double eta = P.etaAbs;
  UpdateResult out;
  PseudoBundle& q = out.bundle;
  q.etaAbs = eta;

  const Vector dv = P.pinv * b;
  const Vector ev = P.pinv.transpose() * c;
  const Vector fv = b - A * dv;
  // (I - pinv A) c; pinv A is symmetric, so apply the transpose form.
  const Vector g1 = c - (P.pinv * A).transpose() * c;

  const double ds = dv.squaredNorm();
  const double es = ev.squaredNorm();
  const double fs = fv.squaredNorm();
  const double gs = g1.squaredNorm();
  const double lambda = 1.0 + c.dot(dv);

  const bool fzero = fv.norm() <= eta;
  const bool gzero = g1.norm() <= eta;
  const bool lzero = std::abs(lambda) <= eta;

  auto add_corr = [&out](const Vector& L, const Vector& R) {
    out.corrections.emplace_back(L, R);
  };

  if (fzero && gzero && lzero) {
    // Rank decreases by one.
    const Vector AtD = P.pinv.transpose() * dv;        // (d^T pinv)^T
    const Vector pe = P.pinv * ev;
    const double dAe = dv.dot(pe);
    const Vector t1L = -(1.0 / ds) * dv;
    const Vector t2L = (1.0 / es) * (-pe + (dAe / ds) * dv);
    q.pinv = P.pinv + t1L * AtD.transpose() + t2L * ev.transpose();
    add_corr(t1L, AtD);
    add_corr(t2L, ev);
    const Vector nL = (1.0 / std::sqrt(ds * es)) * dv;
    q.nullproj = P.nullproj + nL * ev.transpose();
    add_corr(nL, ev);
    q.detMod = -(1.0 / std::sqrt(ds * es)) * P.detMod;
    q.rankDef = P.rankDef + 1;
  } else if (fzero && gzero) {
    // Sherman-Morrison branch; nullspace untouched.
    const Vector t1L = -(1.0 / lambda) * dv;
    q.pinv = P.pinv + t1L * ev.transpose();
    add_corr(t1L, ev);
    q.nullproj = P.nullproj;
    q.detMod = P.detMod / lambda;
    q.rankDef = P.rankDef;
  } else if (fzero) {
    // Right nullspace rotates toward d; rank unchanged.
    const double mu = lambda * lambda + ds * gs;
    const Vector AtD = P.pinv.transpose() * dv;
    const Vector r1 = gs * AtD + lambda * ev;
    const Vector r2 = -ds * ev + lambda * AtD;
    q.pinv = P.pinv - (1.0 / mu) * dv * r1.transpose() + (1.0 / mu) * g1 * r2.transpose();
    add_corr(-(1.0 / mu) * dv, r1);
    add_corr((1.0 / mu) * g1, r2);
    const double sgn = (lambda >= 0.0) ? 1.0 : -1.0;
    const double smu = std::sqrt(mu);
    // limit form of (|l|(sqrt(mu)-|l|) g + l g_s d) / (g_s |l| sqrt(mu))
    const Vector w = ((smu - std::abs(lambda)) / (gs * smu)) * g1 + (sgn / smu) * dv;
    const Vector rowv = P.nullproj.transpose() * g1;  // g^T nullproj as a column
    q.nullproj = P.nullproj - w * rowv.transpose();
    add_corr(-w, rowv);
    q.detMod = P.detMod * sgn / smu;
    q.rankDef = P.rankDef;
  } else if (gzero) {
    // Left nullspace rotates toward e; mirror of the previous branch.
    const double nu = lambda * lambda + es * fs;
    const Vector pe = P.pinv * ev;
    const Vector l1 = -(1.0 / nu) * (fs * pe + lambda * dv);
    const Vector l2 = (1.0 / nu) * (-es * dv + lambda * pe);
    q.pinv = P.pinv + l1 * ev.transpose() + l2 * fv.transpose();
    add_corr(l1, ev);
    add_corr(l2, fv);
    const double sgn = (lambda >= 0.0) ? 1.0 : -1.0;
    const double snu = std::sqrt(nu);
    const Vector w = ((snu - std::abs(lambda)) / (fs * snu)) * fv + (sgn / snu) * ev;
    const Vector colv = P.nullproj * fv;
    q.nullproj = P.nullproj - colv * w.transpose();
    add_corr(-colv, w);
    q.detMod = P.detMod * sgn / snu;
    q.rankDef = P.rankDef;
  } else {
    // Rank increases by one. The printed rules pair f-hat with g-hat through
    // nullproj, so re-orient the stored null basis first when needed.
    Matrix nullp = P.nullproj;
    double det0 = P.detMod;
    const Vector ghat = g1 / std::sqrt(gs);
    const Vector fhat = fv / std::sqrt(fs);
    const Vector t = nullp * fhat;
    const Vector h = t - ghat;
    if (h.norm() > 1e-12) {
      const Vector hrow = nullp.transpose() * h;
      nullp -= (2.0 / h.squaredNorm()) * h * hrow.transpose();
      add_corr(-(2.0 / h.squaredNorm()) * h, hrow);
      det0 = -det0;
    }
    const Vector t1L = -(1.0 / fs) * dv;
    const Vector r2 = -ev + (lambda / fs) * fv;
    q.pinv = P.pinv + t1L * fv.transpose() + (1.0 / gs) * g1 * r2.transpose();
    add_corr(t1L, fv);
    add_corr((1.0 / gs) * g1, r2);
    const double root = std::sqrt(gs * fs);
    q.nullproj = nullp - (1.0 / root) * g1 * fv.transpose();
    add_corr(-(1.0 / root) * g1, fv);
    const double gpf = g1.dot(nullp * fv);
    q.detMod = det0 * (1.0 + (1.0 / (gs * fs) - 1.0 / root) * gpf);
    q.rankDef = P.rankDef - 1;
  }

  q.modinv = q.pinv + q.nullproj;
  q.nullPairs = detail::factor_nullproj(q.nullproj, q.rankDef);
  return out;
}

// 1/detMod, i.e. |A| when the bundle is nonsingular and 1/|A-ddagger|
// otherwise; the uniform prefactor of the inner-product formulas.
inline double pseudo_det(const PseudoBundle& p) { return 1.0 / p.detMod; }

}  // namespace detsum
