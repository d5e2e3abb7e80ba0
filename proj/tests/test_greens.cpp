#include <catch2/catch_amalgamated.hpp>

#include "detsum/greens.hpp"
#include "detsum/oracle.hpp"
#include "helpers.hpp"

#include <cmath>

using namespace detsum;
using testhelp::random_orbitals;

namespace {

// 1D kinetic-dominated model: 16 interior points, modest spacing.
struct Model {
  ParticleSpace sp;
  OneBodyOp op;
  PoissonOp pop;
};

Model greens_model() {
  ModelConfig cfg;
  cfg.dim = 1;
  cfg.pointsPerDim = 16;
  cfg.spacing = 0.5;
  Nucleus nuc;
  nuc.charge = 1.0;
  nuc.position = {3.75, 0.0, 0.0};
  cfg.nuclei.push_back(nuc);
  Model m;
  build_grid_model(cfg, m.sp, m.op, m.pop);
  return m;
}

}  // namespace

TEST_CASE("exponential sums carry their own certificate") {
  long lastL = 0;
  for (double eps : {1e-2, 1e-4, 1e-6}) {
    ExpSum es = build_expsum(eps, 1e8);
    const double cap = 4.0 * std::log(1.0 / eps) * std::log(1.0 / eps);
    CHECK(static_cast<double>(es.terms.size()) <= cap);
    CHECK(static_cast<long>(es.terms.size()) >= lastL);
    lastL = static_cast<long>(es.terms.size());
    for (const auto& [w, tau] : es.terms) {
      CHECK(w > 0.0);
      CHECK(tau > 0.0);
    }
    CHECK(expsum_certificate(es, 1e8) <= eps);
    CHECK(std::abs(expsum_value(es, 1.0) - 1.0) <= eps);
  }
}

TEST_CASE("exponential sum construction rejects bad requests") {
  CHECK_THROWS_AS(build_expsum(0.0, 10.0), std::invalid_argument);
  CHECK_THROWS_AS(build_expsum(1.5, 10.0), std::invalid_argument);
  CHECK_THROWS_AS(build_expsum(1e-4, 0.5), std::invalid_argument);
  // A 50% tolerance over four decades needs more terms than its own cap
  // admits; the construction must refuse rather than hand back junk.
  CHECK_THROWS_AS(build_expsum(0.5, 1e4), std::runtime_error);
}

TEST_CASE("substituted exponential sum approximates 1/s on the shifted interval") {
  const double eps = 1e-4;
  ExpSum es = build_expsum(eps, 1e6);
  const double mu = -1.7;
  for (int k = 0; k <= 40; ++k) {
    const double s = -mu * std::exp(std::log(0.99e6) * k / 40.0);
    double acc = 0.0;
    for (const auto& [w, tau] : es.terms) acc += (w / -mu) * std::exp(-tau * s / -mu);
    CHECK(std::abs(1.0 - s * acc) <= eps);
  }
}

TEST_CASE("separated resolvent matches the exact kinetic resolvent") {
  Model m = greens_model();
  const double eps = 1e-4;
  ExpSum es = build_expsum(eps, 1e4);
  Eigen::SelfAdjointEigenSolver<Matrix> eig(m.op.Tmat);
  const Vector& lam = eig.eigenvalues();
  const Matrix& Q = eig.eigenvectors();

  SECTION("single particle, eigenvector action") {
    for (double mu : {-0.5, -2.0}) {
      GreensRep rep = build_greens(es, mu, m.sp, m.op, 1);
      for (int k = 0; k < m.sp.Ms; k += 3) {
        Orbital f = Orbital::Zero(m.sp.Mtot);
        f.segment(0, m.sp.Ms) = Q.col(k);
        Orbital acc = Orbital::Zero(m.sp.Mtot);
        for (int p = 0; p < static_cast<int>(rep.Fmats.size()); ++p)
          acc += apply_F(m.sp, rep, p, f);
        Orbital want = f / (lam[k] - mu);
        CHECK((acc - want).norm() <= 1.25 * eps * want.norm());
      }
    }
  }

  SECTION("two particles, separable probes against the dense resolvent") {
    auto rng = make_rng(501);
    OneBodyOp kinetic;
    kinetic.Tmat = m.op.Tmat;
    kinetic.Vdiag = Vector::Zero(m.sp.Ms);
    const Matrix single = oracle::dense_one_body_matrix(m.sp, kinetic);
    for (double mu : {-0.5, -2.0}) {
      GreensRep rep = build_greens(es, mu, m.sp, m.op, 2);
      for (int trial = 0; trial < 2; ++trial) {
        auto gh = random_orbitals(rng, m.sp, 2);
        Vector probe = oracle::dense_term_tensor(m.sp, SlaterTerm{1.0, gh});
        Vector want = oracle::dense_resolvent_apply(m.sp, single, mu, probe, 2);
        Vector got = Vector::Zero(probe.size());
        for (int p = 0; p < static_cast<int>(rep.Fmats.size()); ++p) {
          std::vector<Orbital> mapped{apply_F(m.sp, rep, p, gh[0]), apply_F(m.sp, rep, p, gh[1])};
          got += oracle::dense_term_tensor(m.sp, SlaterTerm{1.0, mapped});
        }
        CHECK((got - want).norm() <= 5.0 * eps * want.norm());
      }
    }
  }

  SECTION("relative accuracy does not degrade with the particle count") {
    const double mu = -2.0;
    for (int n : {1, 2, 3}) {
      GreensRep rep = build_greens(es, mu, m.sp, m.op, n);
      // On a product of kinetic eigenvectors every term acts by scalars.
      const int idx[3] = {0, 5, 11};
      double got = 0.0;
      for (int p = 0; p < static_cast<int>(rep.Fmats.size()); ++p) {
        double prod = 1.0;
        for (int i = 0; i < n; ++i) prod *= Q.col(idx[i]).dot(rep.Fmats[p] * Q.col(idx[i]));
        got += prod;
      }
      double lamSum = 0.0;
      for (int i = 0; i < n; ++i) lamSum += lam[idx[i]];
      const double want = 1.0 / (lamSum - mu);
      CHECK(std::abs(got - want) <= 1.25 * eps * std::abs(want));
    }
  }
}

TEST_CASE("propagator matrices are symmetric, positive, and spin-diagonal") {
  Model m = greens_model();
  ExpSum es = build_expsum(1e-3, 1e4);
  GreensRep rep = build_greens(es, -1.0, m.sp, m.op, 2);
  auto rng = make_rng(502);

  const int p = static_cast<int>(rep.Fmats.size()) / 2;
  CHECK((rep.Fmats[p] - rep.Fmats[p].transpose()).norm() <= 1e-12);
  Eigen::SelfAdjointEigenSolver<Matrix> eig(rep.Fmats[p]);
  CHECK(eig.eigenvalues().minCoeff() > 0.0);

  Orbital upOnly = Orbital::Zero(m.sp.Mtot);
  upOnly.segment(0, m.sp.Ms) = random_vector(rng, m.sp.Ms);
  Orbital mapped = apply_F(m.sp, rep, p, upOnly);
  CHECK(mapped.segment(m.sp.Ms, m.sp.Ms).norm() == 0.0);

  Orbital f = random_vector(rng, m.sp.Mtot);
  Orbital g = random_vector(rng, m.sp.Mtot);
  const double fg = inner(m.sp, apply_F(m.sp, rep, p, f), g);
  const double gf = inner(m.sp, f, apply_F(m.sp, rep, p, g));
  CHECK(std::abs(fg - gf) <= 1e-12 * std::max(1.0, std::abs(fg)));
}

TEST_CASE("resolvent construction enforces its spectral window") {
  Model m = greens_model();
  ExpSum es = build_expsum(1e-2, 10.0);
  CHECK_THROWS_AS(build_greens(es, 1.0, m.sp, m.op, 1), std::invalid_argument);
  // lambda_max is about 8 here, so even one particle at mu = -0.1 needs a
  // far wider certified interval than R = 10.
  try {
    build_greens(es, -0.1, m.sp, m.op, 2);
    FAIL("expected a spectral-window error");
  } catch (const std::invalid_argument& e) {
    CHECK(std::string(e.what()).find("R") != std::string::npos);
  }
}
