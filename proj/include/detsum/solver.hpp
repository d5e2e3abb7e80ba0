#pragma once

// Alternating least squares on separated wavefunctions: the normal-equation
// kernels, the Green's-function-transformed right-hand side, conjugate
// gradients on orbital tuples, the outer iteration with its mu updates, a
// gradient-descent alternative, and the incremental reuse paths that carry
// overlap factorizations from one direction solve to the next.

#include "detsum/asym.hpp"
#include "detsum/core.hpp"
#include "detsum/greens.hpp"
#include "detsum/linalg.hpp"
#include "detsum/space.hpp"
#include "detsum/wave.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <future>
#include <limits>
#include <ostream>
#include <random>
#include <string>
#include <utility>
#include <vector>

namespace detsum {

struct SolveConfig {
  int r = 1;
  int N = 1;
  int I = 30;           // Green iterations
  int S = 30;           // CG step cap per direction
  double cgTol = 1e-10;
  double epsExpsum = 1e-6;
  double etaRel = 1e-10;
  std::string muRule = "rayleigh";  // or "newton"
  std::uint64_t seed = 1;
  bool fastPath = false;
  std::string initMode = "aufbau";
  int threads = 1;
};

struct TraceRow {
  int iter = 0;
  double mu = 0.0;
  double rayleighQ = 0.0;
  double psiTildeNorm = 0.0;
  double maxCgResidual = 0.0;
  double seconds = 0.0;
};

struct Trace {
  std::vector<TraceRow> rows;
};

inline void write_trace_csv(std::ostream& os, const Trace& trace) {
  os << "iter,mu,rayleigh,psiTildeNorm,maxCgResidual,seconds\n";
  char buf[160];
  for (const TraceRow& r : trace.rows) {
    std::snprintf(buf, sizeof buf, "%d,%.17g,%.17g,%.17g,%.17g,%.3f\n", r.iter, r.mu, r.rayleighQ,
                  r.psiTildeNorm, r.maxCgResidual, r.seconds);
    os << buf;
  }
}

// Incremental-path consistency failures (debug builds recompute every reused
// factorization from scratch and compare); each failure falls back to the
// fresh construction.
inline std::atomic<long>& fastpath_fallback_count() {
  static std::atomic<long> counter{0};
  return counter;
}

// Off-direction orbitals of one term, ascending slot order. k is 1-based.
inline std::vector<Orbital> direction_tail(const SlaterTerm& term, int k) {
  std::vector<Orbital> tail;
  tail.reserve(term.orbitals.size() - 1);
  for (int i = 0; i < static_cast<int>(term.orbitals.size()); ++i)
    if (i != k - 1) tail.push_back(term.orbitals[i]);
  return tail;
}

// Moving the solve direction from k-1 to k swaps exactly one tail entry; its
// position is the same for every term and for bra/ket alike.
inline int tail_change_pos(int k) { return k - 2; }

inline double tuple_inner(const ParticleSpace& sp, const std::vector<Orbital>& a,
                          const std::vector<Orbital>& b) {
  double acc = 0.0;
  for (size_t l = 0; l < a.size(); ++l) acc += inner(sp, a[l], b[l]);
  return acc;
}

// --- normal-equation kernels -------------------------------------------------

struct KernelBlock {
  double scale = 1.0;   // product of the two term coefficients
  double factor = 1.0;  // pseudo determinant of the off-direction overlap D
  int rankDef = 0;
  Matrix pinv;    // modified inverse of D (used when nonsingular)
  Vector u, v;    // nullspace pair when deficiency is one
};

struct NormalKernel {
  int r = 0;
  int nTail = 0;
  std::vector<std::vector<Orbital>> tails;  // per term, N-1 off-direction orbitals
  std::vector<KernelBlock> blocks;          // r*r, row-major (l, lp)
};

// --- reuse state -------------------------------------------------------------

// Everything retained between consecutive direction solves in one sweep. The
// overlap factorizations are advanced by rank-one updates instead of being
// recomputed; all cached artifacts are tied to a fixed propagator (mu).
struct FastState {
  int dirD = 0;  // direction the D-side artifacts belong to (0 = empty)
  int dirE = 0;
  double mu = 0.0;
  // D side, per (l, lp) pair of psiTilde terms
  std::vector<Matrix> D;
  std::vector<PseudoBundle> Dbun;
  std::vector<std::vector<Orbital>> tails;  // psiTilde tails at direction dirD
  std::vector<Orbital> deltaPhi;            // tail entry change from dirD-1 to dirD, per term
  // E side, per (l, m, p) triple: l over psiTilde terms, m over psi terms,
  // p over propagator terms
  struct EBlock {
    bool usable = false;
    Matrix E0, E;  // E0 = bordered matrix with its first row zeroed
    PseudoBundle e0bun, ebun;
    std::vector<std::pair<Vector, Vector>> borderCorr;  // modinv(E) - modinv(E0)
    Vector d;
    std::vector<Orbital> theta;
    std::vector<Orbital> combo;  // pairwise-kernel cache, one orbital per ket slot
  };
  std::vector<EBlock> eblocks;
  std::vector<std::vector<Orbital>> ftails;  // per (l, p): propagated bra tails
  int L = 0;                                 // propagator term count
};

// --- incremental update primitives -------------------------------------------

// Advances the factorization of an off-direction overlap matrix after both
// orbital lists changed in position pos: a row update (zero at pos) chained
// with a column update whose pos entry carries the full diagonal difference.
struct DUpdateResult {
  Matrix D;
  PseudoBundle bundle;
  std::vector<std::pair<Vector, Vector>> corrections;
};

inline DUpdateResult update_D(const Matrix& D1, const PseudoBundle& b1, const Vector& rowDiff,
                              const Vector& colDiff, int pos) {
  const int n = static_cast<int>(D1.rows());
  require(pos >= 0 && pos < n, "update_D: position out of range");
  require(rowDiff.size() == n && colDiff.size() == n, "update_D: diff length mismatch");
  require(rowDiff[pos] == 0.0, "update_D: row diff must be zero at the replaced position");
  Vector ePos = Vector::Zero(n);
  ePos[pos] = 1.0;
  UpdateResult u1 = rank_one_update(b1, D1, ePos, rowDiff);
  Matrix Dmid = D1 + ePos * rowDiff.transpose();
  UpdateResult u2 = rank_one_update(u1.bundle, Dmid, colDiff, ePos);
  DUpdateResult out;
  out.D = Dmid + colDiff * ePos.transpose();
  out.bundle = std::move(u2.bundle);
  out.corrections = std::move(u1.corrections);
  out.corrections.insert(out.corrections.end(), u2.corrections.begin(), u2.corrections.end());
  return out;
}

// Advances a bordered-matrix factorization after one bra-tail row changed:
// updates the zero-bordered matrix, re-extracts the kernel direction d (only
// well defined when the updated tail block keeps full rank), and re-borders.
struct EUpdateResult {
  bool ok = false;  // false: kernel direction ambiguous, rebuild from scratch
  Matrix E0, E;
  PseudoBundle e0bundle, ebundle;
  Vector d;
  std::vector<std::pair<Vector, Vector>> rowCorr;     // modinv(E0 new) - modinv(E0 old)
  std::vector<std::pair<Vector, Vector>> borderCorr;  // modinv(E new) - modinv(E0 new)
};

inline EUpdateResult update_E(const Matrix& E0_1, const PseudoBundle& e0b1, const Vector& rowDiff,
                              int row) {
  const int n = static_cast<int>(E0_1.rows());
  require(row >= 1 && row < n, "update_E: row index out of range");
  require(rowDiff.size() == n, "update_E: diff length mismatch");
  EUpdateResult out;
  Vector eRow = Vector::Zero(n);
  eRow[row] = 1.0;
  UpdateResult u1 = rank_one_update(e0b1, E0_1, eRow, rowDiff);
  out.E0 = E0_1 + eRow * rowDiff.transpose();
  out.rowCorr = std::move(u1.corrections);
  if (u1.bundle.rankDef != 1) {
    out.e0bundle = std::move(u1.bundle);
    return out;  // ok stays false
  }
  out.d = u1.bundle.nullPairs[0].second;
  fix_vector_sign(out.d);
  Vector e0 = Vector::Zero(n);
  e0[0] = 1.0;
  UpdateResult u2 = rank_one_update(u1.bundle, out.E0, e0, out.d);
  out.E = out.E0 + e0 * out.d.transpose();
  out.e0bundle = std::move(u1.bundle);
  out.ebundle = std::move(u2.bundle);
  out.borderCorr = std::move(u2.corrections);
  out.ok = true;
  return out;
}

// The biorthogonal list Theta = modinv(E) [0; tail] changes by a short sum of
// rank-one pieces: one from the tail entry swap, the rest from the modified
// inverse corrections of the factorization updates. Each piece is a
// coefficient column alpha paired with a single orbital rho.
struct StructuredTerm {
  Vector alpha;
  Orbital rho;
};

inline std::vector<StructuredTerm> theta_update_terms(
    const Matrix& modinvE1, int stackPos, const Orbital& deltaPhi,
    const std::vector<std::pair<Vector, Vector>>& rowCorr,
    const std::vector<std::pair<Vector, Vector>>& borderCorr2,
    const std::vector<std::pair<Vector, Vector>>& borderCorr1,
    const std::vector<Orbital>& braTail2) {
  std::vector<StructuredTerm> terms;
  terms.push_back({modinvE1.col(stackPos), deltaPhi});
  // stack entry 0 is the placeholder zero function; entry j >= 1 is tail j-1.
  auto contract_stack = [&](const Vector& R) {
    Orbital rho = Orbital::Zero(deltaPhi.size());
    for (size_t i = 0; i < braTail2.size(); ++i)
      if (R[static_cast<int>(i) + 1] != 0.0) rho += R[static_cast<int>(i) + 1] * braTail2[i];
    return rho;
  };
  for (const auto& [L, R] : rowCorr) terms.push_back({L, contract_stack(R)});
  for (const auto& [L, R] : borderCorr2) terms.push_back({L, contract_stack(R)});
  for (const auto& [L, R] : borderCorr1) terms.push_back({-L, contract_stack(R)});
  return terms;
}

inline std::vector<Orbital> update_theta(const std::vector<Orbital>& theta1,
                                         const std::vector<StructuredTerm>& terms) {
  std::vector<Orbital> theta = theta1;
  for (const StructuredTerm& t : terms)
    for (size_t i = 0; i < theta.size(); ++i)
      if (t.alpha[static_cast<int>(i)] != 0.0) theta[i] += t.alpha[static_cast<int>(i)] * t.rho;
  return theta;
}

// Fresh construction of the pairwise-kernel cache C_j = sum_i ket_i W[theta_i ket_j].
inline std::vector<Orbital> build_wp_combo(const ParticleSpace& sp, const PoissonOp& pop,
                                           const std::vector<Orbital>& theta,
                                           const std::vector<Orbital>& ket) {
  const int n = static_cast<int>(ket.size());
  std::vector<Orbital> combo(n, Orbital::Zero(sp.Mtot));
  for (int j = 0; j < n; ++j)
    for (int i = 0; i < n; ++i) {
      Vector w = apply_WP(sp, pop, theta[i].cwiseProduct(ket[j]));
      combo[j] += mul_spatial(sp, w, ket[i]);
    }
  return combo;
}

// Incremental form: the Theta change enters linearly, one Poisson apply per
// structured term and ket slot.
inline std::vector<Orbital> update_wp_combo(const ParticleSpace& sp, const PoissonOp& pop,
                                            const std::vector<Orbital>& combo1,
                                            const std::vector<Orbital>& ket,
                                            const std::vector<StructuredTerm>& terms) {
  const int n = static_cast<int>(ket.size());
  std::vector<Orbital> combo = combo1;
  for (const StructuredTerm& t : terms) {
    Orbital ketAlpha = detail::combine(ket, t.alpha);
    for (int j = 0; j < n; ++j) {
      Vector w = apply_WP(sp, pop, t.rho.cwiseProduct(ket[j]));
      combo[j] += mul_spatial(sp, w, ketAlpha);
    }
  }
  return combo;
}

namespace detail {

inline bool bundle_matches(const PseudoBundle& a, const PseudoBundle& b, double tol) {
  if (a.rankDef != b.rankDef) return false;
  if (std::abs(a.detMod - b.detMod) > tol * std::max(1.0, std::abs(b.detMod))) return false;
  if ((a.modinv - b.modinv).cwiseAbs().maxCoeff() >
      tol * std::max(1.0, b.modinv.cwiseAbs().maxCoeff()))
    return false;
  if ((a.nullproj - b.nullproj).cwiseAbs().maxCoeff() > tol) return false;
  return true;
}

inline bool orbitals_match(const std::vector<Orbital>& a, const std::vector<Orbital>& b,
                           double tol) {
  for (size_t i = 0; i < a.size(); ++i) {
    double scale = std::max(1.0, b[i].cwiseAbs().maxCoeff());
    if ((a[i] - b[i]).cwiseAbs().maxCoeff() > tol * scale) return false;
  }
  return true;
}

}  // namespace detail

// Builds the direction-k normal kernels from the current fit. When a reuse
// state from direction k-1 is supplied, every overlap factorization is
// advanced by rank-one updates (and, in debug builds, checked against the
// fresh construction).
inline NormalKernel build_normal_matrix(const ParticleSpace& sp,
                                        const SeparatedWavefunction& psiTilde, int k,
                                        double etaRel = 1e-10, FastState* fast = nullptr) {
  validate(psiTilde);
  const int n = psiTilde.N();
  const int r = psiTilde.r();
  require(k >= 1 && k <= n, "build_normal_matrix: direction out of range");
  NormalKernel kern;
  kern.r = r;
  kern.nTail = n - 1;
  kern.tails.reserve(r);
  for (int l = 0; l < r; ++l) kern.tails.push_back(direction_tail(psiTilde.terms[l], k));
  kern.blocks.resize(static_cast<size_t>(r) * r);

  const bool incremental = fast && kern.nTail > 0 && fast->dirD == k - 1 &&
                           static_cast<int>(fast->tails.size()) == r &&
                           fast->D.size() == static_cast<size_t>(r) * r &&
                           tail_change_pos(k) >= 0;
  const int pos = tail_change_pos(k);
  std::vector<Orbital> delta(r);
  if (incremental)
    for (int l = 0; l < r; ++l) delta[l] = kern.tails[l][pos] - fast->tails[l][pos];

  std::vector<Matrix> newD(static_cast<size_t>(r) * r);
  std::vector<PseudoBundle> newBun(static_cast<size_t>(r) * r);

  for (int l = 0; l < r; ++l)
    for (int lp = 0; lp < r; ++lp) {
      KernelBlock& blk = kern.blocks[static_cast<size_t>(l) * r + lp];
      blk.scale = psiTilde.terms[l].s * psiTilde.terms[lp].s;
      if (kern.nTail == 0) continue;  // empty overlap: kernel is the identity
      const size_t idx = static_cast<size_t>(l) * r + lp;
      bool done = false;
      if (incremental) {
        Vector rowDiff = Vector::Zero(kern.nTail);
        for (int j = 0; j < kern.nTail; ++j)
          if (j != pos) rowDiff[j] = inner(sp, delta[l], fast->tails[lp][j]);
        // Column diff pairs the already-updated bra tail with the ket change;
        // the diagonal entry carries the full before/after difference.
        Vector colDiff(kern.nTail);
        for (int i = 0; i < kern.nTail; ++i)
          colDiff[i] = (i == pos) ? inner(sp, kern.tails[l][pos], kern.tails[lp][pos]) -
                                        fast->D[idx](pos, pos)
                                  : inner(sp, kern.tails[l][i], delta[lp]);
        DUpdateResult upd = update_D(fast->D[idx], fast->Dbun[idx], rowDiff, colDiff, pos);
#ifndef NDEBUG
        PseudoBundle fresh = compute_pseudo(overlap_matrix(sp, kern.tails[l], kern.tails[lp]),
                                            etaRel);
        if (!detail::bundle_matches(upd.bundle, fresh, 1e-10)) {
          fastpath_fallback_count().fetch_add(1, std::memory_order_relaxed);
          upd.D = overlap_matrix(sp, kern.tails[l], kern.tails[lp]);
          upd.bundle = fresh;
        }
#endif
        newD[idx] = upd.D;
        newBun[idx] = upd.bundle;
        done = true;
      }
      if (!done) {
        newD[idx] = overlap_matrix(sp, kern.tails[l], kern.tails[lp]);
        newBun[idx] = compute_pseudo(newD[idx], etaRel);
      }
      detail::record_threshold_margin(newBun[idx]);
      const PseudoBundle& bun = newBun[idx];
      blk.factor = pseudo_det(bun);
      blk.rankDef = bun.rankDef;
      if (bun.rankDef == 0) {
        blk.pinv = bun.modinv;
      } else if (bun.rankDef == 1) {
        const auto& pr = nullspace_pairs(bun)[0];
        blk.u = pr.first;
        blk.v = pr.second;
      }
    }

  if (fast) {
    fast->D = std::move(newD);
    fast->Dbun = std::move(newBun);
    fast->tails = kern.tails;
    fast->deltaPhi = incremental ? std::move(delta) : std::vector<Orbital>();
    fast->dirD = k;
  }
  return kern;
}

// Applies the assembled normal operator. The coincidence delta acts as the
// identity; the remaining part is a short sum over tail orbitals. Summation
// order over lp is fixed ascending so results are reproducible.
inline std::vector<Orbital> apply_normal(const ParticleSpace& sp, const NormalKernel& kern,
                                         const std::vector<Orbital>& x) {
  require(static_cast<int>(x.size()) == kern.r, "apply_normal: tuple size mismatch");
  std::vector<Orbital> out(kern.r, Orbital::Zero(sp.Mtot));
  for (int l = 0; l < kern.r; ++l)
    for (int lp = 0; lp < kern.r; ++lp) {
      const KernelBlock& blk = kern.blocks[static_cast<size_t>(l) * kern.r + lp];
      if (blk.scale == 0.0) continue;
      if (kern.nTail == 0) {
        out[l] += blk.scale * x[lp];
        continue;
      }
      if (blk.rankDef == 0) {
        Orbital acc = x[lp];
        for (int j = 0; j < kern.nTail; ++j) {
          double c = 0.0;
          for (int i = 0; i < kern.nTail; ++i)
            if (blk.pinv(j, i) != 0.0) c += blk.pinv(j, i) * inner(sp, kern.tails[l][i], x[lp]);
          acc -= c * kern.tails[lp][j];
        }
        out[l] += blk.scale * blk.factor * acc;
      } else if (blk.rankDef == 1) {
        Orbital ketV = detail::combine(kern.tails[lp], blk.v);
        Orbital braU = detail::combine(kern.tails[l], blk.u);
        out[l] += -blk.scale * blk.factor * inner(sp, braU, x[lp]) * ketV;
      }
      // deficiency two or more: the block vanishes identically
    }
  return out;
}

// Right-hand side of the direction-k normal equations: the propagated
// delta-localized products of the previous iterate against the current fit's
// off-direction orbitals, summed over propagator terms with the one-particle
// potential only (the kinetic part lives inside the propagator). The bra
// delta sits in slot k, which contributes an alternating sign once the tail
// is brought to the leading position.
inline std::vector<Orbital> build_rhs(const ParticleSpace& sp, const OneBodyOp& op,
                                      const PoissonOp& pop, const SeparatedWavefunction& psiTilde,
                                      const SeparatedWavefunction& psi, const GreensRep& rep,
                                      int k, double etaRel = 1e-10, int threads = 1,
                                      FastState* fast = nullptr) {
  validate(psiTilde);
  validate(psi);
  const int n = psiTilde.N();
  require(psi.N() == n, "build_rhs: particle count mismatch");
  require(k >= 1 && k <= n, "build_rhs: direction out of range");
  const int r = psiTilde.r();
  const int rm = psi.r();
  const int L = static_cast<int>(rep.Fmats.size());
  const double sign = (k % 2 == 1) ? 1.0 : -1.0;

  OneBodyOp vOnly;
  vOnly.Vdiag = op.Vdiag;

  const bool incremental = fast && fast->dirE == k - 1 && fast->dirD == k && fast->mu == rep.mu &&
                           fast->L == L && static_cast<int>(fast->deltaPhi.size()) == r &&
                           fast->eblocks.size() == static_cast<size_t>(r) * rm * L;
  const int pos = tail_change_pos(k);

  if (fast && !incremental) {
    fast->eblocks.assign(static_cast<size_t>(r) * rm * L, FastState::EBlock{});
    fast->ftails.assign(static_cast<size_t>(r) * L, {});
    fast->L = L;
    fast->mu = rep.mu;
  }

  // Kets are the previous iterate's full orbital lists in natural slot order;
  // they are fixed for the whole sweep.
  std::vector<std::vector<Orbital>> tails(r);
  for (int l = 0; l < r; ++l) tails[l] = direction_tail(psiTilde.terms[l], k);

  // preF[l][p]: the m-sum before the final propagator application.
  std::vector<std::vector<Orbital>> preF(r, std::vector<Orbital>(L, Orbital::Zero(sp.Mtot)));

  auto process_p = [&](int p) {
    for (int l = 0; l < r; ++l) {
      // Propagated bra tail for this (l, p).
      std::vector<Orbital>* ft = fast ? &fast->ftails[static_cast<size_t>(l) * L + p] : nullptr;
      std::vector<Orbital> freshTail;
      const std::vector<Orbital>* braTail = nullptr;
      Orbital fDelta;
      bool haveDelta = false;
      if (incremental && ft && static_cast<int>(ft->size()) == n - 1) {
        fDelta = apply_F(sp, rep, p, fast->deltaPhi[l]);
        (*ft)[pos] += fDelta;
        braTail = ft;
        haveDelta = true;
      } else {
        freshTail.resize(n - 1);
        for (int i = 0; i < n - 1; ++i) freshTail[i] = apply_F(sp, rep, p, tails[l][i]);
        if (ft) {
          *ft = freshTail;
          braTail = ft;
        } else {
          braTail = &freshTail;
        }
      }
      for (int m = 0; m < rm; ++m) {
        const std::vector<Orbital>& ket = psi.terms[m].orbitals;
        FastState::EBlock* blk =
            fast ? &fast->eblocks[(static_cast<size_t>(l) * rm + m) * L + p] : nullptr;
        Orbital contrib;
        bool viaCache = false;
        if (blk && haveDelta && blk->usable) {
          Vector rowDiff(n);
          for (int j = 0; j < n; ++j) rowDiff[j] = inner(sp, fDelta, ket[j]);
          EUpdateResult upd = update_E(blk->E0, blk->e0bun, rowDiff, pos + 1);
          if (upd.ok) {
            std::vector<StructuredTerm> terms = theta_update_terms(
                blk->ebun.modinv, pos + 1, fDelta, upd.rowCorr, upd.borderCorr, blk->borderCorr,
                *braTail);
            std::vector<Orbital> theta2 = update_theta(blk->theta, terms);
            std::vector<Orbital> combo2 =
                n >= 2 ? update_wp_combo(sp, pop, blk->combo, ket, terms) : blk->combo;
#ifndef NDEBUG
            {
              DeltaContext freshCtx = make_delta_context(sp, *braTail, ket, etaRel);
              bool okChk = freshCtx.ed.Ebundle.rankDef == upd.ebundle.rankDef &&
                           detail::bundle_matches(upd.ebundle, freshCtx.ed.Ebundle, 1e-10) &&
                           (upd.d - freshCtx.ed.d).cwiseAbs().maxCoeff() <= 1e-10 &&
                           detail::orbitals_match(theta2, freshCtx.thetaTilde, 1e-10);
              if (okChk && n >= 2) {
                std::vector<Orbital> freshCombo =
                    build_wp_combo(sp, pop, freshCtx.thetaTilde, ket);
                okChk = detail::orbitals_match(combo2, freshCombo, 1e-10);
              }
              if (!okChk) {
                fastpath_fallback_count().fetch_add(1, std::memory_order_relaxed);
                upd.ok = false;
              }
            }
#endif
            if (upd.ok) {
              blk->E0 = std::move(upd.E0);
              blk->E = std::move(upd.E);
              blk->e0bun = std::move(upd.e0bundle);
              blk->ebun = std::move(upd.ebundle);
              blk->borderCorr = std::move(upd.borderCorr);
              blk->d = std::move(upd.d);
              blk->theta = std::move(theta2);
              blk->combo = std::move(combo2);
              DeltaContext ctx;
              ctx.ed.E = blk->E;
              ctx.ed.d = blk->d;
              ctx.ed.Ebundle = blk->ebun;
              ctx.pseudoDet = pseudo_det(blk->ebun);
              ctx.thetaTilde = blk->theta;
              contrib = ip_delta_TV(sp, vOnly, ctx, *braTail, ket);
              if (n >= 2) contrib += ip_delta_W(sp, pop, ctx, *braTail, ket, &blk->combo);
              viaCache = true;
            }
          }
          if (!viaCache) blk->usable = false;
        }
        if (!viaCache) {
          DeltaContext ctx = make_delta_context(sp, *braTail, ket, etaRel);
          contrib = ip_delta_TV(sp, vOnly, ctx, *braTail, ket);
          const bool regular = ctx.ed.Ebundle.rankDef == 0;
          std::vector<Orbital> combo;
          if (n >= 2) {
            if (regular) {
              combo = build_wp_combo(sp, pop, ctx.thetaTilde, ket);
              contrib += ip_delta_W(sp, pop, ctx, *braTail, ket, &combo);
            } else {
              contrib += ip_delta_W(sp, pop, ctx, *braTail, ket);
            }
          }
          if (blk) {
            // Re-seed the incremental state for the next direction.
            blk->usable = false;
            if (n >= 2 && regular) {
              Matrix E0 = ctx.ed.E;
              E0.row(0).setZero();
              PseudoBundle e0b = compute_pseudo(E0, etaRel);
              if (e0b.rankDef == 1) {
                Vector e0vec = Vector::Zero(n);
                e0vec[0] = 1.0;
                UpdateResult border = rank_one_update(e0b, E0, e0vec, ctx.ed.d);
                blk->E0 = std::move(E0);
                blk->E = ctx.ed.E;
                blk->e0bun = std::move(e0b);
                blk->ebun = std::move(border.bundle);
                blk->borderCorr = std::move(border.corrections);
                blk->d = ctx.ed.d;
                blk->theta = ctx.thetaTilde;
                blk->combo = std::move(combo);
                blk->usable = true;
              }
            }
          }
        }
        preF[l][p] += psi.terms[m].s * contrib;
      }
    }
  };

  if (threads > 1 && L > 1) {
    const int nChunks = std::min(threads, L);
    std::vector<std::future<void>> futs;
    futs.reserve(nChunks);
    for (int c = 0; c < nChunks; ++c) {
      futs.push_back(std::async(std::launch::async, [&, c]() {
        for (int p = c; p < L; p += nChunks) process_p(p);
      }));
    }
    for (auto& f : futs) f.get();
  } else {
    for (int p = 0; p < L; ++p) process_p(p);
  }

  std::vector<Orbital> b(r, Orbital::Zero(sp.Mtot));
  for (int l = 0; l < r; ++l) {
    for (int p = 0; p < L; ++p) b[l] += apply_F(sp, rep, p, preF[l][p]);
    b[l] *= -psiTilde.terms[l].s * sign;
  }
  if (fast) fast->dirE = k;
  return b;
}

// --- conjugate gradients ------------------------------------------------------

struct CgResult {
  std::vector<Orbital> x;
  double residual = 0.0;  // relative to the right-hand side norm
  int steps = 0;
};

inline CgResult cg_solve(const ParticleSpace& sp, const NormalKernel& kern,
                         const std::vector<Orbital>& b, std::vector<Orbital> x0, int S,
                         double cgTol) {
  require(static_cast<int>(b.size()) == kern.r, "cg_solve: rhs size mismatch");
  require(static_cast<int>(x0.size()) == kern.r, "cg_solve: start size mismatch");
  CgResult out;
  const double bnorm = std::sqrt(tuple_inner(sp, b, b));
  if (bnorm == 0.0) {
    out.x.assign(kern.r, Orbital::Zero(sp.Mtot));
    return out;
  }
  out.x = std::move(x0);
  std::vector<Orbital> ax = apply_normal(sp, kern, out.x);
  std::vector<Orbital> res(kern.r);
  for (int l = 0; l < kern.r; ++l) res[l] = b[l] - ax[l];
  std::vector<Orbital> v = res;
  double c = tuple_inner(sp, res, res);
  for (int step = 0; step < S && std::sqrt(c) > cgTol * bnorm; ++step) {
    std::vector<Orbital> z = apply_normal(sp, kern, v);
    const double vz = tuple_inner(sp, v, z);
    if (vz < -1e-12)
      throw std::runtime_error("cg_solve: operator is not positive semidefinite");
    if (vz <= 0.0) break;  // search direction in the nullspace; no progress possible
    const double t = c / vz;
    for (int l = 0; l < kern.r; ++l) {
      out.x[l] += t * v[l];
      res[l] -= t * z[l];
    }
    const double d = tuple_inner(sp, res, res);
    for (int l = 0; l < kern.r; ++l) v[l] = res[l] + (d / c) * v[l];
    c = d;
    out.steps = step + 1;
  }
  out.residual = std::sqrt(c) / bnorm;
  return out;
}

// --- single direction solve ---------------------------------------------------

// Minimizes the fit error over the direction-k orbitals of psiTilde, keeping
// everything else fixed: assemble kernels and right-hand side, CG from the
// current orbitals, then normalize each solution into its term coefficient.
// Returns the relative CG residual.
inline double als_direction_solve(const ParticleSpace& sp, const OneBodyOp& op,
                                  const PoissonOp& pop, SeparatedWavefunction& psiTilde,
                                  const SeparatedWavefunction& psi, const GreensRep& rep, int k,
                                  const SolveConfig& cfg, std::mt19937_64& rng,
                                  FastState* fast = nullptr) {
  NormalKernel kern = build_normal_matrix(sp, psiTilde, k, cfg.etaRel, fast);
  std::vector<Orbital> b =
      build_rhs(sp, op, pop, psiTilde, psi, rep, k, cfg.etaRel, cfg.threads, fast);
  std::vector<Orbital> x0(psiTilde.r());
  for (int l = 0; l < psiTilde.r(); ++l) x0[l] = psiTilde.terms[l].orbitals[k - 1];
  CgResult cg = cg_solve(sp, kern, b, std::move(x0), cfg.S, cfg.cgTol);
  for (int l = 0; l < psiTilde.r(); ++l) {
    const double nrm = std::sqrt(std::max(0.0, inner(sp, cg.x[l], cg.x[l])));
    if (nrm > 0.0) {
      psiTilde.terms[l].orbitals[k - 1] = cg.x[l] / nrm;
      psiTilde.terms[l].s *= nrm;
    } else {
      Orbital noise = random_vector(rng, sp.Mtot);
      noise /= std::sqrt(inner(sp, noise, noise));
      psiTilde.terms[l].orbitals[k - 1] = noise;
      psiTilde.terms[l].s = 0.0;  // term deactivated for this sweep
    }
  }
  return cg.residual;
}

// --- energy functionals ---------------------------------------------------------

namespace detail {

// sum over term pairs of s_l s_m <A bra_l, (T+V+W) ket_m>; W enters only with
// two or more particles.
inline double ip_h_sum(const ParticleSpace& sp, const OneBodyOp& op, const PoissonOp& pop,
                       const SeparatedWavefunction& f, const SeparatedWavefunction& g,
                       double etaRel) {
  double acc = 0.0;
  const bool pairwise = f.N() >= 2;
  for (const SlaterTerm& tl : f.terms)
    for (const SlaterTerm& tm : g.terms) {
      if (tl.s == 0.0 || tm.s == 0.0) continue;
      double v = ip_TV(sp, op, tl.orbitals, tm.orbitals, etaRel);
      if (pairwise) v += ip_W(sp, pop, tl.orbitals, tm.orbitals, etaRel);
      acc += tl.s * tm.s * v;
    }
  return acc;
}

inline double ip_overlap_sum(const ParticleSpace& sp, const SeparatedWavefunction& f,
                             const SeparatedWavefunction& g) {
  double acc = 0.0;
  for (const SlaterTerm& tl : f.terms)
    for (const SlaterTerm& tm : g.terms)
      acc += tl.s * tm.s * lowdin_det(sp, tl.orbitals, tm.orbitals);
  return acc;
}

}  // namespace detail

inline double rayleigh(const ParticleSpace& sp, const OneBodyOp& op, const PoissonOp& pop,
                       const SeparatedWavefunction& psi, double etaRel = 1e-10) {
  validate(psi);
  const double n2 = detail::ip_overlap_sum(sp, psi, psi);
  if (n2 <= 0.0)
    throw std::runtime_error("rayleigh: degenerate wavefunction (zero pseudo norm)");
  return detail::ip_h_sum(sp, op, pop, psi, psi, etaRel) / n2;
}

// One shift update step: mu - <(V+W) psi, psi - psiTilde> / |psiTilde|^2, with
// the raw (pre-normalization) fit result.
inline double mu_newton(const ParticleSpace& sp, const OneBodyOp& op, const PoissonOp& pop,
                        const SeparatedWavefunction& psiN, const SeparatedWavefunction& psiTildeN,
                        double muN, double etaRel = 1e-10) {
  validate(psiN);
  validate(psiTildeN);
  const double n2t = detail::ip_overlap_sum(sp, psiTildeN, psiTildeN);
  if (n2t <= 0.0)
    throw std::runtime_error("mu_newton: degenerate fit (zero pseudo norm)");
  OneBodyOp vOnly;
  vOnly.Vdiag = op.Vdiag;
  SeparatedWavefunction diff;
  diff.terms = psiN.terms;
  for (const SlaterTerm& t : psiTildeN.terms) {
    diff.terms.push_back(t);
    diff.terms.back().s = -t.s;
  }
  const double num = detail::ip_h_sum(sp, vOnly, pop, psiN, diff, etaRel);
  return muN - num / n2t;
}

// --- initialization -------------------------------------------------------------

// Occupies the lowest one-particle levels with alternating spin channels and
// perturbs each term by small seeded noise confined to the orbital's own
// channel, so definite spin patterns survive exactly.
inline SeparatedWavefunction initial_guess(const ParticleSpace& sp, const OneBodyOp& op,
                                           const SolveConfig& cfg) {
  require(cfg.r >= 1 && cfg.N >= 1, "initial_guess: r and N must be positive");
  require(cfg.initMode == "aufbau" || cfg.initMode == "random",
          "initial_guess: unknown init mode: " + cfg.initMode);
  require((cfg.N + 1) / 2 <= sp.Ms, "initial_guess: more particles than levels");
  Matrix H = op.Tmat;
  H.diagonal() += op.Vdiag;
  Eigen::SelfAdjointEigenSolver<Matrix> eig(H);
  require(eig.info() == Eigen::Success, "initial_guess: eigensolve failed");
  std::mt19937_64 rng = make_rng(cfg.seed);
  std::uniform_real_distribution<double> noise(-0.01, 0.01);
  SeparatedWavefunction psi;
  psi.terms.resize(cfg.r);
  for (int l = 0; l < cfg.r; ++l) {
    psi.terms[l].s = 1.0;
    psi.terms[l].orbitals.assign(cfg.N, Orbital::Zero(sp.Mtot));
    for (int i = 0; i < cfg.N; ++i) {
      const int spin = i % 2;
      Orbital& phi = psi.terms[l].orbitals[i];
      auto seg = phi.segment(spin * sp.Ms, sp.Ms);
      if (cfg.initMode == "aufbau") seg = eig.eigenvectors().col(i / 2);
      for (int j = 0; j < sp.Ms; ++j) seg[j] += noise(rng);
      phi /= std::sqrt(inner(sp, phi, phi));
    }
  }
  return psi;
}

// --- outer iteration --------------------------------------------------------------

enum class IterStatus { Converged, IterationLimit, MuNonNegative };

struct IterateResult {
  SeparatedWavefunction psi;
  double mu = 0.0;
  Trace trace;
  IterStatus status = IterStatus::IterationLimit;
};

// Inverse-iteration driver: per iteration, one alternating sweep fits the
// propagated previous iterate, the result is normalized, and the shift is
// advanced by the selected rule. Stops at the iteration cap, at a shift step
// below 1e-9, or — with failure status — when the shift leaves the negative
// half-axis where the propagator exists.
inline IterateResult greens_iterate(const ParticleSpace& sp, const OneBodyOp& op,
                                    const PoissonOp& pop, const SeparatedWavefunction& psi0,
                                    const SolveConfig& cfg) {
  validate(psi0);
  require(cfg.r >= 1 && cfg.I >= 1 && cfg.S >= 1, "greens_iterate: r, I, S must be positive");
  require(cfg.muRule == "rayleigh" || cfg.muRule == "newton",
          "greens_iterate: unknown mu rule: " + cfg.muRule);
  const int n = psi0.N();
  IterateResult out;
  out.psi = psi0;
  double nrm0 = norm_A(sp, out.psi);
  if (nrm0 <= 0.0)
    throw std::runtime_error("greens_iterate: degenerate start (zero pseudo norm)");
  for (SlaterTerm& t : out.psi.terms) t.s /= nrm0;
  out.mu = rayleigh(sp, op, pop, out.psi, cfg.etaRel);
  if (out.mu >= 0.0) {
    out.status = IterStatus::MuNonNegative;
    return out;
  }
  Eigen::SelfAdjointEigenSolver<Matrix> eig(op.Tmat, Eigen::EigenvaluesOnly);
  const double lamMax = eig.eigenvalues().maxCoeff();
  std::mt19937_64 rng = make_rng(cfg.seed ^ 0x736f6c766572ULL);
  ExpSum es;
  for (int it = 1; it <= cfg.I; ++it) {
    const auto t0 = std::chrono::steady_clock::now();
    const double needed = (n * lamMax - out.mu) / (-out.mu);
    if (es.terms.empty() || needed > es.validUpper)
      es = build_expsum(cfg.epsExpsum, std::max(10.0, 2.0 * needed));
    GreensRep rep = build_greens(es, out.mu, sp, op, n);
    FastState fs;
    FastState* fptr = cfg.fastPath ? &fs : nullptr;
    SeparatedWavefunction psiTilde = out.psi;
    double maxResid = 0.0;
    for (int k = 1; k <= n; ++k)
      maxResid = std::max(
          maxResid, als_direction_solve(sp, op, pop, psiTilde, out.psi, rep, k, cfg, rng, fptr));
    const double nrmT = norm_A(sp, psiTilde);
    if (nrmT <= 0.0)
      throw std::runtime_error("greens_iterate: fit collapsed to zero pseudo norm");
    double muNew;
    if (cfg.muRule == "newton") muNew = mu_newton(sp, op, pop, out.psi, psiTilde, out.mu, cfg.etaRel);
    out.psi = psiTilde;
    for (SlaterTerm& t : out.psi.terms) t.s /= nrmT;
    const double ray = rayleigh(sp, op, pop, out.psi, cfg.etaRel);
    if (cfg.muRule != "newton") muNew = ray;
    const double seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    out.trace.rows.push_back({it, muNew, ray, nrmT, maxResid, seconds});
    const double dmu = std::abs(muNew - out.mu);
    out.mu = muNew;
    if (out.mu >= 0.0) {
      out.status = IterStatus::MuNonNegative;
      return out;
    }
    if (dmu <= 1e-9) {
      out.status = IterStatus::Converged;
      return out;
    }
  }
  out.status = IterStatus::IterationLimit;
  return out;
}

// --- gradient descent ----------------------------------------------------------

// Functional gradient of the Rayleigh quotient (with shift mu in place of the
// quotient itself): per term and slot, the delta-localized action of the
// shifted Hamiltonian against the whole wavefunction. The slot's delta is
// brought to the front, which contributes the alternating sign.
inline std::vector<std::vector<Orbital>> gradient(const ParticleSpace& sp, const OneBodyOp& op,
                                                  const PoissonOp& pop,
                                                  const SeparatedWavefunction& psi, double mu,
                                                  double etaRel = 1e-10) {
  validate(psi);
  const int n = psi.N();
  const int r = psi.r();
  const double n2 = detail::ip_overlap_sum(sp, psi, psi);
  if (n2 <= 0.0) throw std::runtime_error("gradient: degenerate wavefunction");
  std::vector<std::vector<Orbital>> g(r, std::vector<Orbital>(n));
  for (int l = 0; l < r; ++l)
    for (int j = 1; j <= n; ++j) {
      const double sign = (j % 2 == 1) ? 1.0 : -1.0;
      std::vector<Orbital> tail = direction_tail(psi.terms[l], j);
      Orbital acc = Orbital::Zero(sp.Mtot);
      for (int m = 0; m < r; ++m) {
        const std::vector<Orbital>& ket = psi.terms[m].orbitals;
        DeltaContext ctx = make_delta_context(sp, tail, ket, etaRel);
        Orbital term = ip_delta_TV(sp, op, ctx, tail, ket);
        if (n >= 2) term += ip_delta_W(sp, pop, ctx, tail, ket);
        term -= mu * ip_delta(sp, ctx, ket);
        acc += psi.terms[m].s * term;
      }
      g[l][j - 1] = (2.0 / n2) * psi.terms[l].s * sign * acc;
    }
  return g;
}

enum class GradMode { Full, PerDirection };

namespace detail {

inline double rayleigh_of(const ParticleSpace& sp, const OneBodyOp& op, const PoissonOp& pop,
                          const SeparatedWavefunction& psi, double etaRel) {
  const double n2 = ip_overlap_sum(sp, psi, psi);
  if (n2 <= 0.0) return std::numeric_limits<double>::infinity();
  return ip_h_sum(sp, op, pop, psi, psi, etaRel) / n2;
}

// Absorb orbital norms into the term coefficients.
inline void renormalize_orbitals(const ParticleSpace& sp, SeparatedWavefunction& psi) {
  for (SlaterTerm& t : psi.terms)
    for (Orbital& phi : t.orbitals) {
      const double nrm = std::sqrt(std::max(0.0, inner(sp, phi, phi)));
      if (nrm > 0.0) {
        phi /= nrm;
        t.s *= nrm;
      }
    }
}

}  // namespace detail

// One gradient-descent pass. Full mode moves every orbital along its gradient
// with a halving line search; per-direction mode moves one slot at a time
// with the step chosen by exact minimization of the quotient along the ray (a
// quadratic-over-quadratic rational whose critical points solve a quadratic).
inline SeparatedWavefunction grad_step(const ParticleSpace& sp, const OneBodyOp& op,
                                       const PoissonOp& pop, const SeparatedWavefunction& psi0,
                                       double mu, GradMode mode, double etaRel = 1e-10) {
  SeparatedWavefunction psi = psi0;
  validate(psi);
  const int n = psi.N();
  const int r = psi.r();

  if (mode == GradMode::Full) {
    std::vector<std::vector<Orbital>> g = gradient(sp, op, pop, psi, mu, etaRel);
    const double r0 = detail::rayleigh_of(sp, op, pop, psi, etaRel);
    double t = 1.0;
    for (int h = 0; h < 60; ++h, t *= 0.5) {
      SeparatedWavefunction trial = psi;
      for (int l = 0; l < r; ++l)
        for (int j = 0; j < n; ++j) trial.terms[l].orbitals[j] -= t * g[l][j];
      if (detail::rayleigh_of(sp, op, pop, trial, etaRel) < r0) {
        psi = std::move(trial);
        break;
      }
    }
    detail::renormalize_orbitals(sp, psi);
    return psi;
  }

  for (int j = 1; j <= n; ++j) {
    std::vector<std::vector<Orbital>> g = gradient(sp, op, pop, psi, mu, etaRel);
    SeparatedWavefunction dir = psi;  // same tails, gradient in slot j
    for (int l = 0; l < r; ++l) dir.terms[l].orbitals[j - 1] = g[l][j - 1];
    const double h0 = detail::ip_h_sum(sp, op, pop, psi, psi, etaRel);
    const double h1 = detail::ip_h_sum(sp, op, pop, psi, dir, etaRel);
    const double h2 = detail::ip_h_sum(sp, op, pop, dir, dir, etaRel);
    const double n0 = detail::ip_overlap_sum(sp, psi, psi);
    const double n1 = detail::ip_overlap_sum(sp, psi, dir);
    const double n2 = detail::ip_overlap_sum(sp, dir, dir);
    const double r0 = h0 / n0;
    // d/dt of (h0 - 2t h1 + t^2 h2)/(n0 - 2t n1 + t^2 n2) = 0
    const double qa = h1 * n2 - h2 * n1;
    const double qb = h2 * n0 - h0 * n2;
    const double qc = h0 * n1 - h1 * n0;
    double bestT = 0.0;
    double bestR = r0;
    auto consider = [&](double t) {
      const double den = n0 - 2.0 * t * n1 + t * t * n2;
      if (den <= 0.0) return;
      const double val = (h0 - 2.0 * t * h1 + t * t * h2) / den;
      if (val < bestR) {
        bestR = val;
        bestT = t;
      }
    };
    if (qa != 0.0) {
      const double disc = qb * qb - 4.0 * qa * qc;
      if (disc >= 0.0) {
        const double sq = std::sqrt(disc);
        consider((-qb + sq) / (2.0 * qa));
        consider((-qb - sq) / (2.0 * qa));
      }
    } else if (qb != 0.0) {
      consider(-qc / qb);
    }
    if (bestT == 0.0) {
      // Degenerate or non-improving quadratic: halving line search.
      double t = 1.0;
      for (int h = 0; h < 60; ++h, t *= 0.5) {
        const double den = n0 - 2.0 * t * n1 + t * t * n2;
        if (den <= 0.0) continue;
        const double val = (h0 - 2.0 * t * h1 + t * t * h2) / den;
        if (val < r0) {
          bestT = t;
          break;
        }
      }
    }
    if (bestT != 0.0)
      for (int l = 0; l < r; ++l) psi.terms[l].orbitals[j - 1] -= bestT * g[l][j - 1];
    detail::renormalize_orbitals(sp, psi);
  }
  return psi;
}

}  // namespace detsum
