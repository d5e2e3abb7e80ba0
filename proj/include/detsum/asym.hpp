#pragma once

// Antisymmetric inner products between Slater products: the plain Lowdin
// determinant, operator-weighted variants for the one-body and pairwise
// operators with full rank-deficiency dispatch, and the delta-localized
// variants that return gamma-functions. Every branch ends in a closed-form
// expression over orbitals; nothing here materializes N-particle tensors.

#include "detsum/core.hpp"
#include "detsum/linalg.hpp"
#include "detsum/space.hpp"
#include "detsum/wave.hpp"

#include <atomic>
#include <vector>

namespace detsum {

// Count of kept singular values that landed within 10x of the rank cutoff
// across all dispatches; a borderline dispatch is numerically fragile and
// worth surfacing.
inline std::atomic<long>& near_threshold_count() {
  static std::atomic<long> counter{0};
  return counter;
}

namespace detail {

inline void record_threshold_margin(const PseudoBundle& p) {
  for (int i = 0; i < p.singvals.size(); ++i)
    if (p.singvals[i] > p.etaAbs && p.singvals[i] <= 10.0 * p.etaAbs)
      near_threshold_count().fetch_add(1, std::memory_order_relaxed);
}

// Linear combination sum_j coeff_j * orbitals[j].
inline Orbital combine(const std::vector<Orbital>& orbitals, const Vector& coeff) {
  Orbital out = Orbital::Zero(orbitals.front().size());
  for (size_t j = 0; j < orbitals.size(); ++j)
    if (coeff[static_cast<int>(j)] != 0.0) out += coeff[static_cast<int>(j)] * orbitals[j];
  return out;
}

// Same, with coeff indexed over the bordered row set: coeff[0] belongs to the
// placeholder slot (a zero function), coeff[i] to tail[i-1].
inline Orbital combine_tail(const std::vector<Orbital>& tail, const Vector& coeff, int mtot) {
  Orbital out = Orbital::Zero(mtot);
  for (size_t i = 0; i < tail.size(); ++i)
    if (coeff[static_cast<int>(i) + 1] != 0.0) out += coeff[static_cast<int>(i) + 1] * tail[i];
  return out;
}

// Pointwise sum_i a_i(gamma) b_i(gamma).
inline Orbital pointwise_dot(const std::vector<Orbital>& a, const std::vector<Orbital>& b) {
  Orbital out = Orbital::Zero(a.front().size());
  for (size_t i = 0; i < a.size(); ++i) out += a[i].cwiseProduct(b[i]);
  return out;
}

}  // namespace detail

// <A bra-product, ket-product> = |L|, the Lowdin rule.
inline double ip_lowdin(const ParticleSpace& sp, const std::vector<Orbital>& bra,
                        const std::vector<Orbital>& ket) {
  return lowdin_det(sp, bra, ket);
}

// One-body-weighted antisymmetric inner product <A bra, (T+V) ket>.
inline double ip_TV(const ParticleSpace& sp, const OneBodyOp& op, const std::vector<Orbital>& bra,
                    const std::vector<Orbital>& ket, double etaRel = 1e-10) {
  require(bra.size() == ket.size(), "ip_TV: particle count mismatch");
  CoincidenceData cd = max_coincidence(sp, bra, ket, etaRel);
  detail::record_threshold_margin(cd.Lbundle);
  const int q = cd.Lbundle.rankDef;
  if (q >= 2) return 0.0;
  if (q == 0) {
    double acc = 0.0;
    for (size_t i = 0; i < ket.size(); ++i)
      acc += inner(sp, apply_TV(sp, op, ket[i]), cd.theta[i]);
    return cd.detFactor * acc;
  }
  const auto& [u1, v1] = nullspace_pairs(cd.Lbundle)[0];
  return cd.detFactor *
         inner(sp, apply_TV(sp, op, detail::combine(ket, v1)), detail::combine(bra, u1));
}

// Pairwise-operator-weighted antisymmetric inner product <A bra, W ket>.
inline double ip_W(const ParticleSpace& sp, const PoissonOp& pop, const std::vector<Orbital>& bra,
                   const std::vector<Orbital>& ket, double etaRel = 1e-10) {
  require(bra.size() == ket.size(), "ip_W: particle count mismatch");
  const int n = static_cast<int>(ket.size());
  if (n < 2) throw std::domain_error("ip_W: pairwise operator needs at least two particles");
  CoincidenceData cd = max_coincidence(sp, bra, ket, etaRel);
  detail::record_threshold_margin(cd.Lbundle);
  const int q = cd.Lbundle.rankDef;
  if (q >= 3) return 0.0;

  if (q == 0) {
    Orbital a = detail::pointwise_dot(ket, cd.theta);
    const double direct = integrate(sp, mul_spatial(sp, apply_WP(sp, pop, a), a));
    double exchange = 0.0;
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) {
        Vector wij = apply_WP(sp, pop, cd.theta[i].cwiseProduct(ket[j]));
        exchange += integrate(sp, mul_spatial(sp, wij, ket[i].cwiseProduct(cd.theta[j])));
      }
    return 0.5 * cd.detFactor * (direct - exchange);
  }
  const auto& pairs = nullspace_pairs(cd.Lbundle);
  if (q == 1) {
    Orbital av = detail::combine(ket, pairs[0].second);
    Orbital bu = detail::combine(bra, pairs[0].first);
    Orbital a = detail::pointwise_dot(ket, cd.theta);
    const double direct =
        integrate(sp, mul_spatial(sp, apply_WP(sp, pop, a), av.cwiseProduct(bu)));
    double exchange = 0.0;
    for (int j = 0; j < n; ++j) {
      Vector wj = apply_WP(sp, pop, bu.cwiseProduct(ket[j]));
      exchange += integrate(sp, mul_spatial(sp, wj, av.cwiseProduct(cd.theta[j])));
    }
    return cd.detFactor * (direct - exchange);
  }
  Orbital av1 = detail::combine(ket, pairs[0].second);
  Orbital av2 = detail::combine(ket, pairs[1].second);
  Orbital bu1 = detail::combine(bra, pairs[0].first);
  Orbital bu2 = detail::combine(bra, pairs[1].first);
  const double direct = integrate(
      sp, mul_spatial(sp, apply_WP(sp, pop, av2.cwiseProduct(bu2)), av1.cwiseProduct(bu1)));
  const double exchange = integrate(
      sp, mul_spatial(sp, apply_WP(sp, pop, av2.cwiseProduct(bu1)), av1.cwiseProduct(bu2)));
  return cd.detFactor * (direct - exchange);
}

// Context for the delta-localized products: the bordered matrix E of the
// bra tail against the ket, with the biorthogonal list computed against the
// placeholder-extended bra (first slot the zero function).
struct DeltaContext {
  EData ed;
  std::vector<Orbital> thetaTilde;
  double pseudoDet = 1.0;
};

inline DeltaContext make_delta_context(const ParticleSpace& sp,
                                       const std::vector<Orbital>& braTail,
                                       const std::vector<Orbital>& ket, double etaRel = 1e-10) {
  DeltaContext ctx;
  ctx.ed = build_E(sp, braTail, ket, etaRel);
  detail::record_threshold_margin(ctx.ed.Ebundle);
  ctx.pseudoDet = pseudo_det(ctx.ed.Ebundle);
  const int n = static_cast<int>(ket.size());
  ctx.thetaTilde.assign(n, Orbital::Zero(sp.Mtot));
  // thetaTilde = modified inverse applied to [0; tail]; the placeholder
  // first entry contributes nothing.
  for (int i = 0; i < n; ++i)
    for (int j = 1; j < n; ++j)
      if (ctx.ed.Ebundle.modinv(i, j) != 0.0)
        ctx.thetaTilde[i] += ctx.ed.Ebundle.modinv(i, j) * braTail[j - 1];
  return ctx;
}

// <delta(gamma - gamma_1) * bra-tail product, ket product>_A as a function
// of gamma: |E| Phi(gamma)^T d. Zero when E is singular.
inline Orbital ip_delta(const ParticleSpace& sp, const DeltaContext& ctx,
                        const std::vector<Orbital>& ket) {
  if (ctx.ed.Ebundle.rankDef >= 1) return Orbital::Zero(sp.Mtot);
  return ctx.pseudoDet * detail::combine(ket, ctx.ed.d);
}

inline Orbital ip_delta(const ParticleSpace& sp, const std::vector<Orbital>& braTail,
                        const std::vector<Orbital>& ket, double etaRel = 1e-10) {
  return ip_delta(sp, make_delta_context(sp, braTail, ket, etaRel), ket);
}

// Same family with the one-body operator applied on the ket side.
inline Orbital ip_delta_TV(const ParticleSpace& sp, const OneBodyOp& op, const DeltaContext& ctx,
                           const std::vector<Orbital>& braTail, const std::vector<Orbital>& ket) {
  const int n = static_cast<int>(ket.size());
  const int q = ctx.ed.Ebundle.rankDef;
  if (q >= 2) return Orbital::Zero(sp.Mtot);
  const Vector& d = ctx.ed.d;
  if (q == 0) {
    Orbital pd = detail::combine(ket, d);
    Orbital tvPd = apply_TV(sp, op, pd);
    double s = 0.0;
    for (int i = 0; i < n; ++i) s += inner(sp, apply_TV(sp, op, ket[i]), ctx.thetaTilde[i]);
    Orbital out = tvPd;
    for (int j = 0; j < n; ++j) out += (d[j] * s - inner(sp, tvPd, ctx.thetaTilde[j])) * ket[j];
    return ctx.pseudoDet * out;
  }
  const auto& [u1, v1] = nullspace_pairs(ctx.ed.Ebundle)[0];
  Orbital bu = detail::combine_tail(braTail, u1, sp.Mtot);
  const double i1 = inner(sp, apply_TV(sp, op, detail::combine(ket, v1)), bu);
  const double i2 = inner(sp, apply_TV(sp, op, detail::combine(ket, d)), bu);
  Orbital out = Orbital::Zero(sp.Mtot);
  for (int j = 0; j < n; ++j) out += (d[j] * i1 - v1[j] * i2) * ket[j];
  return ctx.pseudoDet * out;
}

inline Orbital ip_delta_TV(const ParticleSpace& sp, const OneBodyOp& op,
                           const std::vector<Orbital>& braTail, const std::vector<Orbital>& ket,
                           double etaRel = 1e-10) {
  return ip_delta_TV(sp, op, make_delta_context(sp, braTail, ket, etaRel), braTail, ket);
}

// Same family with the pairwise operator on the ket side. combinedC, when
// supplied, must equal C_j(gamma) = sum_i ket_i(gamma) W_p[thetaTilde_i ket_j](gamma)
// for the context's thetaTilde (the reuse path maintains it incrementally).
inline Orbital ip_delta_W(const ParticleSpace& sp, const PoissonOp& pop, const DeltaContext& ctx,
                          const std::vector<Orbital>& braTail, const std::vector<Orbital>& ket,
                          const std::vector<Orbital>* combinedC = nullptr) {
  const int n = static_cast<int>(ket.size());
  if (n < 2) throw std::domain_error("ip_delta_W: pairwise operator needs at least two particles");
  const int q = ctx.ed.Ebundle.rankDef;
  if (q >= 3) return Orbital::Zero(sp.Mtot);
  const Vector& d = ctx.ed.d;
  Orbital pd = detail::combine(ket, d);

  if (q == 0) {
    const std::vector<Orbital>& th = ctx.thetaTilde;
    Orbital aTheta = detail::pointwise_dot(ket, th);
    Vector wATheta = apply_WP(sp, pop, aTheta);
    // cPd(gamma) = sum_i ket_i(gamma) W_p[th_i pd](gamma)
    Orbital cPd = Orbital::Zero(sp.Mtot);
    std::vector<double> v1t(n), v2t(n);
    for (int i = 0; i < n; ++i) {
      Vector wi = apply_WP(sp, pop, th[i].cwiseProduct(pd));
      cPd += mul_spatial(sp, wi, ket[i]);
    }
    const double s1 = integrate(sp, mul_spatial(sp, wATheta, aTheta));
    double s2 = 0.0;
    if (combinedC) {
      for (int j = 0; j < n; ++j) s2 += inner(sp, (*combinedC)[j], th[j]);
    } else {
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
          Vector wij = apply_WP(sp, pop, th[i].cwiseProduct(ket[j]));
          s2 += integrate(sp, mul_spatial(sp, wij, ket[i].cwiseProduct(th[j])));
        }
    }
    for (int j = 0; j < n; ++j) {
      v1t[j] = integrate(sp, mul_spatial(sp, wATheta, th[j].cwiseProduct(pd)));
      v2t[j] = inner(sp, th[j], cPd);
    }
    Orbital out = 2.0 * (mul_spatial(sp, wATheta, pd) - cPd);
    for (int j = 0; j < n; ++j)
      out += (d[j] * (s1 - s2) - 2.0 * (v1t[j] - v2t[j])) * ket[j];
    return 0.5 * ctx.pseudoDet * out;
  }

  const auto& pairs = nullspace_pairs(ctx.ed.Ebundle);
  if (q == 1) {
    const std::vector<Orbital>& th = ctx.thetaTilde;
    const Vector& u1 = pairs[0].first;
    const Vector& v1 = pairs[0].second;
    Orbital a = detail::combine(ket, v1);
    Orbital b = detail::combine_tail(braTail, u1, sp.Mtot);
    Orbital aTheta = detail::pointwise_dot(ket, th);
    Vector wATheta = apply_WP(sp, pop, aTheta);
    Vector wAB = apply_WP(sp, pop, a.cwiseProduct(b));
    Vector wBpd = apply_WP(sp, pop, b.cwiseProduct(pd));
    double i1 = integrate(sp, mul_spatial(sp, wATheta, a.cwiseProduct(b)));
    double i3 = integrate(sp, mul_spatial(sp, wATheta, pd.cwiseProduct(b)));
    std::vector<double> i2(n);
    for (int j = 0; j < n; ++j) {
      Vector wBj = apply_WP(sp, pop, b.cwiseProduct(ket[j]));
      i1 -= integrate(sp, mul_spatial(sp, wBj, a.cwiseProduct(th[j])));
      i3 -= integrate(sp, mul_spatial(sp, wBj, pd.cwiseProduct(th[j])));
      i2[j] = integrate(sp, mul_spatial(sp, wBpd, th[j].cwiseProduct(a))) -
              integrate(sp, mul_spatial(sp, wAB, th[j].cwiseProduct(pd)));
    }
    Orbital out = mul_spatial(sp, wAB, pd) - mul_spatial(sp, wBpd, a);
    for (int j = 0; j < n; ++j) out += (d[j] * i1 + i2[j] - v1[j] * i3) * ket[j];
    return ctx.pseudoDet * out;
  }

  // deficiency two
  const Vector& u1 = pairs[0].first;
  const Vector& v1 = pairs[0].second;
  const Vector& u2 = pairs[1].first;
  const Vector& v2 = pairs[1].second;
  Orbital a1 = detail::combine(ket, v1);
  Orbital a2 = detail::combine(ket, v2);
  Orbital b1 = detail::combine_tail(braTail, u1, sp.Mtot);
  Orbital b2 = detail::combine_tail(braTail, u2, sp.Mtot);
  Vector wA2B2 = apply_WP(sp, pop, a2.cwiseProduct(b2));
  Vector wB2A1 = apply_WP(sp, pop, b2.cwiseProduct(a1));
  Vector wPdB1 = apply_WP(sp, pop, pd.cwiseProduct(b1));
  Vector wB2Pd = apply_WP(sp, pop, b2.cwiseProduct(pd));
  Vector wPdB2 = apply_WP(sp, pop, pd.cwiseProduct(b2));
  Vector wB1Pd = apply_WP(sp, pop, b1.cwiseProduct(pd));
  const double j1 = integrate(sp, mul_spatial(sp, wA2B2, a1.cwiseProduct(b1))) -
                    integrate(sp, mul_spatial(sp, wB2A1, a2.cwiseProduct(b1)));
  const double j2 = integrate(sp, mul_spatial(sp, wPdB1, a2.cwiseProduct(b2))) -
                    integrate(sp, mul_spatial(sp, wB2Pd, a2.cwiseProduct(b1)));
  const double j3 = integrate(sp, mul_spatial(sp, wPdB2, a1.cwiseProduct(b1))) -
                    integrate(sp, mul_spatial(sp, wB1Pd, a1.cwiseProduct(b2)));
  Orbital out = Orbital::Zero(sp.Mtot);
  for (int j = 0; j < n; ++j) out += (d[j] * j1 - v1[j] * j2 - v2[j] * j3) * ket[j];
  return ctx.pseudoDet * out;
}

inline Orbital ip_delta_W(const ParticleSpace& sp, const PoissonOp& pop,
                          const std::vector<Orbital>& braTail, const std::vector<Orbital>& ket,
                          double etaRel = 1e-10) {
  return ip_delta_W(sp, pop, make_delta_context(sp, braTail, ket, etaRel), braTail, ket);
}

}  // namespace detsum
